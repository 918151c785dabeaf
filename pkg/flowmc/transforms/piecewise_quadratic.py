"""Piecewise-quadratic warp: piecewise-linear density with adaptive bin widths.

Each warped dimension owns K bin widths W (a softmax) and K+1 vertex
densities V, normalized so that the trapezoids under the density sum to 1.
"""

from dataclasses import dataclass
from typing import Tuple
import logging
import numpy as np

from flowmc.errors import ParameterError
from flowmc.models import TransformKind
from flowmc.transforms.base import BaseTransform, ONE_MINUS, broadcast_rows, clamp_unit, gather

logger = logging.getLogger(__name__)

LINEAR_FALLBACK = 1e-12


@dataclass
class PwqParams:
    W: np.ndarray
    V: np.ndarray

    def trapezoid_masses(self) -> np.ndarray:
        return 0.5 * (self.V[..., :-1] + self.V[..., 1:]) * self.W

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.W <= 0) or np.any(np.abs(self.W.sum(axis=-1) - 1.0) > tol):
            raise ParameterError("bin widths must be positive and sum to 1 per row")
        if np.any(np.abs(self.trapezoid_masses().sum(axis=-1) - 1.0) > tol):
            raise ParameterError("vertex densities must integrate to 1 per row")


def _normalize(raw_w: np.ndarray, raw_v: np.ndarray):
    w_shift = raw_w - raw_w.max(axis=-1, keepdims=True)
    w_exp = np.exp(w_shift)
    W = w_exp / w_exp.sum(axis=-1, keepdims=True)
    E = np.exp(raw_v - raw_v.max(axis=-1, keepdims=True))
    S = np.sum(0.5 * (E[..., :-1] + E[..., 1:]) * W, axis=-1, keepdims=True)
    return W, E, S, E / S


def normalize_pwq(raw_w, raw_v) -> PwqParams:
    raw_w = np.asarray(raw_w, dtype=np.float64)
    raw_v = np.asarray(raw_v, dtype=np.float64)
    if not (np.all(np.isfinite(raw_w)) and np.all(np.isfinite(raw_v))):
        raise ParameterError("non-finite piecewise-quadratic logits")
    if raw_v.shape[-1] != raw_w.shape[-1] + 1:
        raise ParameterError("vertex logits need one more column than width logits")
    W, _, _, V = _normalize(raw_w, raw_v)
    return PwqParams(W, V)


def _cumulative(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    upto = np.cumsum(values, axis=-1)
    below = np.concatenate([np.zeros_like(upto[..., :1]), upto[..., :-1]], axis=-1)
    return below, upto


def _locate(x: np.ndarray, W: np.ndarray):
    bins = W.shape[-1]
    w_below, w_upto = _cumulative(W)
    x = clamp_unit(x)
    b = np.minimum(np.sum(w_upto <= x[..., None], axis=-1), bins - 1)
    wb = gather(W, b)
    alpha = np.clip((x - gather(w_below, b)) / wb, 0.0, 1.0)
    return b, alpha, wb


def _evaluate(x: np.ndarray, W: np.ndarray, V: np.ndarray):
    b, alpha, wb = _locate(x, W)
    vb = gather(V, b)
    vb1 = gather(V, b + 1)
    m_below, _ = _cumulative(0.5 * (V[..., :-1] + V[..., 1:]) * W)
    y = 0.5 * alpha * alpha * (vb1 - vb) * wb + alpha * vb * wb + gather(m_below, b)
    pdf = vb + alpha * (vb1 - vb)
    return np.minimum(y, ONE_MINUS), pdf, b, alpha


def pwq_warp(x, W, V) -> Tuple[np.ndarray, np.ndarray]:
    x, W = broadcast_rows(x, W)
    _, V = broadcast_rows(x, V)
    y, pdf, _, _ = _evaluate(x, W, V)
    return y, pdf


def pwq_unwarp(y, W, V) -> np.ndarray:
    """Inverse CDF via the stable root of the per-bin quadratic"""
    y, W = broadcast_rows(y, W)
    _, V = broadcast_rows(y, V)
    bins = W.shape[-1]
    y = clamp_unit(y)
    m_below, m_upto = _cumulative(0.5 * (V[..., :-1] + V[..., 1:]) * W)
    b = np.minimum(np.sum(m_upto < y[..., None], axis=-1), bins - 1)
    wb = gather(W, b)
    vb = gather(V, b)
    vb1 = gather(V, b + 1)
    a = (vb1 - vb) * wb
    lin = vb * wb
    c = np.maximum(y - gather(m_below, b), 0.0)
    disc = np.sqrt(np.maximum(lin * lin + 2.0 * a * c, 0.0))
    denom = lin + disc
    near_linear = np.abs(a) < LINEAR_FALLBACK * np.abs(lin)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(
            near_linear,
            c / np.where(lin > 0.0, lin, 1.0),
            2.0 * c / np.where(denom > 0.0, denom, 1.0),
        )
    # zero-mass bin: left edge
    empty = ~((denom > 0.0) | near_linear)
    if np.any(empty):
        logger.warning(f"Inverting {int(np.count_nonzero(empty))} values inside zero-mass bins")
    alpha = np.where(empty, 0.0, alpha)
    alpha = np.clip(alpha, 0.0, 1.0)
    w_below, _ = _cumulative(W)
    return np.minimum(gather(w_below, b) + alpha * wb, ONE_MINUS)


@dataclass
class _PwqCache:
    W: np.ndarray
    E: np.ndarray
    S: np.ndarray
    V: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    pdf: np.ndarray


class PiecewiseQuadraticTransform(BaseTransform):
    kind = TransformKind.PIECEWISE_QUADRATIC

    @property
    def params_per_dim(self) -> int:
        return 2 * self.bins + 1

    def _split(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not np.all(np.isfinite(raw)):
            raise ParameterError("non-finite piecewise-quadratic logits")
        return raw[..., :self.bins], raw[..., self.bins:]

    def forward(self, x, raw):
        raw_w, raw_v = self._split(raw)
        W, E, S, V = _normalize(raw_w, raw_v)
        y, pdf, b, alpha = _evaluate(x, W, V)
        with np.errstate(divide="ignore"):
            logpdf = np.log(pdf)
        return y, logpdf, _PwqCache(W, E, S, V, b, alpha, pdf)

    def inverse(self, y, raw):
        raw_w, raw_v = self._split(raw)
        W, _, _, V = _normalize(raw_w, raw_v)
        x = pwq_unwarp(y, W, V)
        _, pdf, _, _ = _evaluate(x, W, V)
        with np.errstate(divide="ignore"):
            return x, np.log(pdf)

    def backward(self, cache: _PwqCache, g_y, g_logpdf):
        W, V, E, S = cache.W, cache.V, cache.E, cache.S
        b, alpha, pdf = cache.b, cache.alpha, cache.pdf
        K = self.bins
        kw = np.arange(K)
        kv = np.arange(K + 1)
        at_b = (kw == b[..., None]).astype(np.float64)
        below_b = (kw < b[..., None]).astype(np.float64)
        wb = gather(W, b)
        vb = gather(V, b)
        delta = gather(V, b + 1) - vb
        g_lp = g_logpdf / pdf
        a = alpha[..., None]

        # alpha = (x - sum_{k<b} W_k) / W_b
        g_alpha = g_y * wb * pdf + g_lp * delta
        g_x = g_alpha / wb

        mid = 0.5 * (V[..., :-1] + V[..., 1:])
        dy_dw = at_b * (0.5 * a * a * delta[..., None] + a * vb[..., None]) + below_b * mid
        dalpha_dw = -(below_b + at_b * a) / wb[..., None]
        g_w = g_y[..., None] * dy_dw + g_alpha[..., None] * dalpha_dw

        at_v = (kv == b[..., None]).astype(np.float64)
        next_v = (kv == (b + 1)[..., None]).astype(np.float64)
        half_w_below = 0.5 * W * below_b
        pad = np.zeros_like(W[..., :1])
        dy_dv = (
            np.concatenate([half_w_below, pad], axis=-1)
            + np.concatenate([pad, half_w_below], axis=-1)
            + at_v * ((a - 0.5 * a * a) * wb[..., None])
            + next_v * (0.5 * a * a * wb[..., None])
        )
        dpdf_dv = at_v * (1.0 - a) + next_v * a
        g_v = g_y[..., None] * dy_dv + g_lp[..., None] * dpdf_dv

        # V = E / S with S = sum_k (E_k + E_{k+1}) / 2 * W_k
        g_s = -np.sum(g_v * V, axis=-1, keepdims=True) / S
        half_w = 0.5 * W
        ds_de = np.concatenate([half_w, pad], axis=-1) + np.concatenate([pad, half_w], axis=-1)
        g_e = g_v / S + g_s * ds_de
        g_w = g_w + g_s * 0.5 * (E[..., :-1] + E[..., 1:])

        g_raw_v = g_e * E
        g_raw_w = W * (g_w - np.sum(W * g_w, axis=-1, keepdims=True))
        return g_x, np.concatenate([g_raw_w, g_raw_v], axis=-1)

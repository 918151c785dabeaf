"""Piecewise-linear warp: piecewise-constant density on K equal-width bins."""

from dataclasses import dataclass
from typing import Tuple
import numpy as np

from flowmc.errors import ParameterError
from flowmc.models import TransformKind
from flowmc.transforms.base import BaseTransform, ONE_MINUS, broadcast_rows, clamp_unit, gather


@dataclass
class PwlParams:
    """Normalized bin masses, one row per warped dimension"""

    Q: np.ndarray

    @property
    def bins(self) -> int:
        return self.Q.shape[-1]

    @property
    def bin_width(self) -> float:
        return 1.0 / self.bins

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.Q < 0) or np.any(np.abs(self.Q.sum(axis=-1) - 1.0) > tol):
            raise ParameterError("bin masses must be nonnegative and sum to 1 per row")


def _softmax(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shifted = raw - raw.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    return e / total, shifted - np.log(total)


def normalize_pwl(raw_logits: np.ndarray) -> PwlParams:
    raw = np.asarray(raw_logits, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ParameterError("non-finite piecewise-linear logits")
    q, _ = _softmax(raw)
    return PwlParams(q)


def _exclusive_cumsum(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    inclusive = np.cumsum(values, axis=-1)
    exclusive = np.concatenate([np.zeros_like(inclusive[..., :1]), inclusive[..., :-1]], axis=-1)
    return exclusive, inclusive


def _locate(x: np.ndarray, bins: int) -> Tuple[np.ndarray, np.ndarray]:
    t = clamp_unit(x) * bins
    b = np.clip(np.floor(t).astype(np.int64), 0, bins - 1)
    return b, t - b


def pwl_warp(x, Q) -> Tuple[np.ndarray, np.ndarray]:
    """CDF value and density at x for bin masses Q"""
    x, q = broadcast_rows(x, Q)
    bins = q.shape[-1]
    b, alpha = _locate(x, bins)
    below, _ = _exclusive_cumsum(q)
    qb = gather(q, b)
    y = np.minimum(alpha * qb + gather(below, b), ONE_MINUS)
    return y, qb * bins


def pwl_unwarp(y, Q) -> np.ndarray:
    """Inverse CDF; a zero-mass bin maps to its left edge"""
    y, q = broadcast_rows(y, Q)
    bins = q.shape[-1]
    y = clamp_unit(y)
    below, upto = _exclusive_cumsum(q)
    b = np.minimum(np.sum(upto < y[..., None], axis=-1), bins - 1)
    qb = gather(q, b)
    safe = np.where(qb > 0.0, qb, 1.0)
    alpha = np.where(qb > 0.0, (y - gather(below, b)) / safe, 0.0)
    alpha = np.clip(alpha, 0.0, 1.0)
    return np.minimum((b + alpha) / bins, ONE_MINUS)


@dataclass
class _PwlCache:
    q: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    pdf: np.ndarray


class PiecewiseLinearTransform(BaseTransform):
    kind = TransformKind.PIECEWISE_LINEAR

    @property
    def params_per_dim(self) -> int:
        return self.bins

    def forward(self, x, raw):
        if not np.all(np.isfinite(raw)):
            raise ParameterError("non-finite piecewise-linear logits")
        q, log_q = _softmax(raw)
        b, alpha = _locate(x, self.bins)
        below, _ = _exclusive_cumsum(q)
        qb = gather(q, b)
        y = np.minimum(alpha * qb + gather(below, b), ONE_MINUS)
        pdf = qb * self.bins
        logpdf = gather(log_q, b) + np.log(self.bins)
        return y, logpdf, _PwlCache(q, b, alpha, pdf)

    def inverse(self, y, raw):
        params = normalize_pwl(raw)
        x = pwl_unwarp(y, params.Q)
        _, logpdf, _ = self.forward(x, raw)
        return x, logpdf

    def backward(self, cache: _PwlCache, g_y, g_logpdf):
        k = np.arange(self.bins)
        at_b = (k == cache.b[..., None]).astype(np.float64)
        below_b = (k < cache.b[..., None]).astype(np.float64)
        # d y / d Q through the softmax
        g_q = g_y[..., None] * (cache.alpha[..., None] * at_b + below_b)
        g_raw = cache.q * (g_q - np.sum(cache.q * g_q, axis=-1, keepdims=True))
        # d log Q_b / d raw = onehot(b) - Q
        g_raw += g_logpdf[..., None] * (at_b - cache.q)
        g_x = g_y * cache.pdf
        return g_x, g_raw

"""Multiply-add and additive couplings on the unit interval.

Values are mapped to logit space, scaled by e^s and shifted by t there,
then squashed back with the logistic function. The reported log pdf
includes both squashing Jacobians.
"""

from dataclasses import dataclass
from typing import Tuple
import logging
import threading
import numpy as np
from scipy.special import expit, log_expit, logit

from flowmc.errors import ParameterError
from flowmc.models import TransformKind
from flowmc.transforms.base import BaseTransform, ONE_MINUS

logger = logging.getLogger(__name__)

DOMAIN_EPS = 1e-6


def clamp_open(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Move exact 0 and 1 inputs to DOMAIN_EPS and 1 - DOMAIN_EPS"""
    x = np.asarray(x, dtype=np.float64)
    clamped = (x <= 0.0) | (x >= 1.0)
    return np.where(x <= 0.0, DOMAIN_EPS, np.where(x >= 1.0, 1.0 - DOMAIN_EPS, x)), clamped


def logit_affine(u, s, t, inverse: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Multiply-add in logit space; returns (value, log det) without squashing terms"""
    u, s, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, s, t)))
    if inverse:
        return (u - t) * np.exp(-s), -s
    return u * np.exp(s) + t, s


def _squash_logdet(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # log sigmoid'(v) - log sigmoid'(u)
    return log_expit(v) + log_expit(-v) - log_expit(u) - log_expit(-u)


def affine_warp(x, s, t, inverse: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-interval multiply-add; returns (y, log det including squash Jacobians)"""
    xc, _ = clamp_open(x)
    u = logit(xc)
    v, log_det = logit_affine(u, s, t, inverse=inverse)
    y = np.minimum(expit(v), ONE_MINUS)
    return y, log_det + _squash_logdet(u, v)


@dataclass
class _AffineCache:
    x: np.ndarray
    u: np.ndarray
    scale: np.ndarray
    sig: np.ndarray
    clamped: np.ndarray


class AffineTransform(BaseTransform):
    """Raw layout per warped dimension: [s, t]"""

    kind = TransformKind.AFFINE

    def __init__(self, bins: int = 32):
        super().__init__(bins)
        self._clamped = 0
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def clamped_inputs(self) -> int:
        return self._clamped

    @property
    def params_per_dim(self) -> int:
        return 2

    def _split(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not np.all(np.isfinite(raw)):
            raise ParameterError(f"non-finite {self.kind.value} parameters")
        return raw[..., 0], raw[..., 1]

    def _clamp(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xc, clamped = clamp_open(x)
        count = int(np.count_nonzero(clamped))
        if count:
            with self._lock:
                self._clamped += count
            logger.warning(f"Clamped {count} {self.kind.value} inputs at the domain boundary")
        return xc, clamped

    def forward(self, x, raw):
        s, t = self._split(raw)
        xc, clamped = self._clamp(x)
        u = logit(xc)
        scale = np.exp(s)
        v = u * scale + t
        sig = expit(v)
        logpdf = s + _squash_logdet(u, v)
        return np.minimum(sig, ONE_MINUS), logpdf, _AffineCache(xc, u, scale, sig, clamped)

    def inverse(self, y, raw):
        s, t = self._split(raw)
        yc, _ = self._clamp(y)
        x = np.minimum(expit((logit(yc) - t) / np.exp(s)), ONE_MINUS)
        _, logpdf, _ = self.forward(x, raw)
        return x, logpdf

    def _pack(self, g_s: np.ndarray, g_t: np.ndarray) -> np.ndarray:
        return np.stack([g_s, g_t], axis=-1)

    def backward(self, cache: _AffineCache, g_y, g_logpdf):
        x, sig = cache.x, cache.sig
        g_v = g_y * sig * (1.0 - sig) + g_logpdf * (1.0 - 2.0 * sig)
        g_s = g_v * cache.u * cache.scale + g_logpdf
        inv_var = 1.0 / (x * (1.0 - x))
        g_x = (g_v * cache.scale + g_logpdf * (2.0 * x - 1.0)) * inv_var
        # clamped inputs are constant w.r.t. x
        g_x = np.where(cache.clamped, 0.0, g_x)
        return g_x, self._pack(g_s, g_v)


class AdditiveTransform(AffineTransform):
    """Translation-only variant: raw layout [t], unit Jacobian in logit space"""

    kind = TransformKind.ADDITIVE

    @property
    def params_per_dim(self) -> int:
        return 1

    def _split(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not np.all(np.isfinite(raw)):
            raise ParameterError(f"non-finite {self.kind.value} parameters")
        t = raw[..., 0]
        return np.zeros_like(t), t

    def _pack(self, g_s: np.ndarray, g_t: np.ndarray) -> np.ndarray:
        return g_t[..., None]

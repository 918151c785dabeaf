from abc import ABC, abstractmethod
from typing import Any, Tuple
import numpy as np

from flowmc.models import TransformKind

# Half-open bins: inputs at exactly 1 are moved just below it.
ONE_MINUS = 1.0 - 2.0 ** -40


def clamp_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, ONE_MINUS)


def gather(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    """values[..., index[...]] along the last axis"""
    return np.take_along_axis(values, index[..., None], axis=-1)[..., 0]


def broadcast_rows(x: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Broadcast scalar positions against per-position parameter rows"""
    x = np.asarray(x, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, rows.shape[:-1])
    return np.broadcast_to(x, shape), np.broadcast_to(rows, shape + rows.shape[-1:])


class BaseTransform(ABC):
    """Separable invertible warp of the unit interval, one per dimension of partition B

    Raw parameters arrive as an (n, |B|, params_per_dim) array produced by the
    coupling network.
    """

    kind: TransformKind

    def __init__(self, bins: int = 32):
        self.bins = int(bins)

    @property
    def clamped_inputs(self) -> int:
        """Boundary inputs moved into the open interval so far"""
        return 0

    @property
    @abstractmethod
    def params_per_dim(self) -> int:
        """Network outputs consumed per warped dimension"""
        pass

    @abstractmethod
    def forward(self, x: np.ndarray, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Any]:
        """Warp x; returns (y, log pdf at x, cache for backward)"""
        pass

    @abstractmethod
    def inverse(self, y: np.ndarray, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Unwarp y; returns (x, log pdf of the forward warp at x)"""
        pass

    @abstractmethod
    def backward(
        self, cache: Any, g_y: np.ndarray, g_logpdf: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Pull back gradients w.r.t. (y, log pdf) to gradients w.r.t. (x, raw)"""
        pass

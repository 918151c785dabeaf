"""One-blob encoding of scalars in [0, 1].

A Gaussian kernel of width 1/k centred at the value is integrated over each
of k uniform bins. Kernel mass falling outside [0, 1] is dropped.
"""

from typing import Optional, Sequence
import numpy as np
from pydantic import BaseModel, Field
from scipy.special import ndtr

from flowmc.errors import DomainError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class OneBlobConfig(BaseModel):
    k: int = Field(default=32, ge=2)

    @property
    def sigma(self) -> float:
        return 1.0 / self.k


def _check_unit(values: np.ndarray) -> None:
    bad = np.flatnonzero(~((values >= 0.0) & (values <= 1.0)))
    if bad.size:
        index = int(bad[0])
        raise DomainError(
            f"one-blob input at index {index} is {values.ravel()[index]!r}, expected a value in [0, 1]"
        )


def one_blob(values: np.ndarray, k: int) -> np.ndarray:
    """Encode an (n, m) array into (n, m*k), block j holding column j"""
    values = np.asarray(values, dtype=np.float64)
    n, m = values.shape
    edges = np.arange(k + 1, dtype=np.float64) / k
    # standardized edge offsets: (edge - s) / sigma
    z = (edges[None, None, :] - values[:, :, None]) * k
    cdf = ndtr(z)
    return (cdf[:, :, 1:] - cdf[:, :, :-1]).reshape(n, m * k)


def one_blob_derivative(values: np.ndarray, k: int) -> np.ndarray:
    """d encode / d value as an (n, m, k) array"""
    values = np.asarray(values, dtype=np.float64)
    edges = np.arange(k + 1, dtype=np.float64) / k
    z = (edges[None, None, :] - values[:, :, None]) * k
    density = np.exp(-0.5 * z * z) * _INV_SQRT_2PI
    return k * (density[:, :, :-1] - density[:, :, 1:])


def one_blob_scalar(s: float, cfg: OneBlobConfig) -> np.ndarray:
    value = np.array([[float(s)]])
    _check_unit(value)
    return one_blob(value, cfg.k)[0]


def encode_features(values: Sequence[float], cfg: OneBlobConfig) -> np.ndarray:
    if len(values) == 0:
        return np.zeros(0)
    row = np.asarray(values, dtype=np.float64).reshape(1, -1)
    _check_unit(row)
    return one_blob(row, cfg.k)[0]


def kernel_mass(s: float, cfg: OneBlobConfig) -> float:
    """Kernel mass inside [0, 1], equal to the sum of the encoding"""
    return float(ndtr((1.0 - s) * cfg.k) - ndtr((0.0 - s) * cfg.k))


def encode_columns(values: np.ndarray, k: Optional[int]) -> np.ndarray:
    """Network input block for an (n, m) array: one-blob codes, or the raw values when k is None"""
    values = np.asarray(values, dtype=np.float64)
    if k is None:
        return values
    return one_blob(values, k)


def encode_columns_backward(values: np.ndarray, g_encoded: np.ndarray, k: Optional[int]) -> np.ndarray:
    """Pull a gradient w.r.t. encode_columns output back to the (n, m) values"""
    if k is None:
        return g_encoded
    n, m = np.shape(values)
    return np.sum(g_encoded.reshape(n, m, k) * one_blob_derivative(values, k), axis=-1)

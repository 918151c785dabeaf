"""Coupling layers: partition A passes through, partition B is warped.

The warp parameters for B are predicted by a network from the encoded
values of A followed by the encoded conditioning features. Because each
warped dimension depends only on A, the Jacobian is triangular and the
log-determinant is the sum of the per-dimension log pdfs.
"""

from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple
import numpy as np

from flowmc.encoding import encode_columns, encode_columns_backward
from flowmc.errors import ShapeError
from flowmc.nnet import GradientSet, Mlp, MlpCache
from flowmc.transforms import BaseTransform


def network_input_width(n_pass: int, n_cond: int, encoding_bins: Optional[int]) -> int:
    """Width of encode(x^A ++ conditioning); a constant column stands in for an empty input"""
    per_value = encoding_bins if encoding_bins is not None else 1
    return max(1, (n_pass + n_cond) * per_value)


@dataclass
class CouplingCache:
    x_pass: np.ndarray
    net_cache: MlpCache
    transform_cache: Any
    n_rows: int


class CouplingLayer:
    """One invertible coupling step over [0,1]^D"""

    def __init__(
        self,
        dim: int,
        mask_b: Sequence[int],
        transform: BaseTransform,
        net: Mlp,
        encoding_bins: Optional[int] = 32,
        n_cond: int = 0,
    ):
        self.dim = int(dim)
        self.mask_b = np.array(sorted(int(i) for i in mask_b), dtype=np.int64)
        self.mask_a = np.array([i for i in range(self.dim) if i not in set(self.mask_b.tolist())], dtype=np.int64)
        self.transform = transform
        self.net = net
        self.encoding_bins = encoding_bins
        self.n_cond = int(n_cond)
        if self.mask_b.size == 0 or self.mask_b.min() < 0 or self.mask_b.max() >= self.dim:
            raise ShapeError(f"partition B {self.mask_b.tolist()} is not a non-empty subset of 0..{self.dim - 1}")
        expected_in = network_input_width(self.mask_a.size, self.n_cond, encoding_bins)
        expected_out = self.mask_b.size * transform.params_per_dim
        if net.input_width != expected_in or net.output_width != expected_out:
            raise ShapeError(
                f"coupling network maps {net.input_width} -> {net.output_width}, "
                f"layer needs {expected_in} -> {expected_out}"
            )

    def parameters(self) -> List[np.ndarray]:
        return self.net.parameters()

    def bump_version(self) -> None:
        self.net.bump_version()

    def _features(self, x_pass: np.ndarray, cond: np.ndarray) -> np.ndarray:
        n = x_pass.shape[0]
        parts = [encode_columns(x_pass, self.encoding_bins), encode_columns(cond, self.encoding_bins)]
        features = np.concatenate(parts, axis=1)
        if features.shape[1] == 0:
            return np.ones((n, 1))
        return features

    def _raw(self, x_pass: np.ndarray, cond: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
        out, net_cache = self.net.forward(self._features(x_pass, cond))
        raw = out.astype(np.float64).reshape(x_pass.shape[0], self.mask_b.size, self.transform.params_per_dim)
        return raw, net_cache

    def _check(self, x: np.ndarray, cond: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        if cond.shape != (x.shape[0], self.n_cond):
            raise ShapeError(f"expected conditioning of shape {(x.shape[0], self.n_cond)}, got {cond.shape}")

    def forward(self, x: np.ndarray, cond: np.ndarray) -> Tuple[np.ndarray, np.ndarray, CouplingCache]:
        """y and log|det dy/dx| per row"""
        self._check(x, cond)
        x_pass = x[:, self.mask_a]
        raw, net_cache = self._raw(x_pass, cond)
        y_b, logpdf, t_cache = self.transform.forward(x[:, self.mask_b], raw)
        y = x.copy()
        y[:, self.mask_b] = y_b
        return y, logpdf.sum(axis=1), CouplingCache(x_pass, net_cache, t_cache, x.shape[0])

    def inverse(self, y: np.ndarray, cond: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """x and log|det dx/dy| per row"""
        self._check(y, cond)
        raw, _ = self._raw(y[:, self.mask_a], cond)
        x_b, logpdf = self.transform.inverse(y[:, self.mask_b], raw)
        x = y.copy()
        x[:, self.mask_b] = x_b
        return x, -logpdf.sum(axis=1)

    def backward(
        self, cache: CouplingCache, g_y: np.ndarray, g_logdet: np.ndarray, input_gradient: bool = True
    ) -> Tuple[GradientSet, Optional[np.ndarray]]:
        """Pull back gradients w.r.t. (y, log det) to the network parameters and x"""
        n_b = self.mask_b.size
        g_logpdf = np.broadcast_to(np.asarray(g_logdet, dtype=np.float64)[:, None], (cache.n_rows, n_b))
        g_xb, g_raw = self.transform.backward(cache.transform_cache, g_y[:, self.mask_b], g_logpdf)
        need_features = input_gradient and self.mask_a.size > 0
        grads, g_features = self.net.backward(
            cache.net_cache, g_raw.reshape(cache.n_rows, -1), input_gradient=need_features
        )
        if not input_gradient:
            return grads, None
        g_x = np.array(g_y, dtype=np.float64, copy=True)
        g_x[:, self.mask_b] = g_xb
        if need_features:
            per_value = self.encoding_bins if self.encoding_bins is not None else 1
            g_pass = g_features[:, :self.mask_a.size * per_value].astype(np.float64)
            g_x[:, self.mask_a] += encode_columns_backward(cache.x_pass, g_pass, self.encoding_bins)
        return grads, g_x


def coupling_forward(layer: CouplingLayer, x: np.ndarray, cond: Optional[np.ndarray] = None):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if cond is None:
        cond = np.zeros((x.shape[0], 0))
    y, log_det, _ = layer.forward(x, np.atleast_2d(cond))
    return y, log_det


def coupling_inverse(layer: CouplingLayer, y: np.ndarray, cond: Optional[np.ndarray] = None):
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if cond is None:
        cond = np.zeros((y.shape[0], 0))
    return layer.inverse(y, np.atleast_2d(cond))

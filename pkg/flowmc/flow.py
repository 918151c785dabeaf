"""Normalizing flows over the unit hypercube built from coupling layers.

The latent density is uniform on [0,1]^D, so the density of a point is the
product of the per-layer Jacobian determinants of the forward pass.
Sampling runs the inverted layers in reverse order.
"""

from copy import deepcopy
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging
import numpy as np

from flowmc.coupling import CouplingCache, CouplingLayer, network_input_width
from flowmc.errors import DomainError, InvalidConfigError, ShapeError
from flowmc.models import PartitionScheme
from flowmc.nnet import GradientSet, u_shape_widths, xavier_init
from flowmc.rng import STREAM_OFFSETS, philox_generator
from flowmc.schemas import ConditioningFeature, FlowSpec, parse_model
from flowmc.transforms import make_transform

logger = logging.getLogger(__name__)


def partition_b(dim: int, layer: int, scheme: PartitionScheme) -> List[int]:
    """0-indexed dimensions warped by `layer` (0-indexed); roles swap every layer"""
    if dim == 1:
        return [0]
    if scheme == PartitionScheme.EVEN_ODD:
        first = [i for i in range(dim) if i % 2 == 0]
    else:
        first = list(range(dim // 2, dim))
    if layer % 2 == 0:
        return first
    return [i for i in range(dim) if i not in first]


@dataclass
class FlowCache:
    layers: List[CouplingCache]
    n_rows: int


class NormalizingFlow:
    """Ordered coupling layers h_1 .. h_L with a shared conditioning context"""

    def __init__(self, spec: FlowSpec, layers: Sequence[CouplingLayer]):
        self.spec = spec
        self.layers = list(layers)
        covered = set()
        for layer in self.layers:
            covered.update(layer.mask_b.tolist())
        if covered != set(range(spec.dim)):
            raise InvalidConfigError(f"dimensions {sorted(set(range(spec.dim)) - covered)} are never warped")

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def conditioning(self) -> List[ConditioningFeature]:
        return self.spec.conditioning

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @property
    def clamped_inputs(self) -> int:
        return sum(layer.transform.clamped_inputs for layer in self.layers)

    def bump_version(self) -> None:
        for layer in self.layers:
            layer.bump_version()

    def copy(self) -> "NormalizingFlow":
        """Independent snapshot for readers"""
        return deepcopy(self)

    def normalize_conditioning(self, values: Optional[np.ndarray], n_rows: int) -> np.ndarray:
        """Map raw feature values to [0,1] with the declared ranges"""
        n_cond = len(self.conditioning)
        if values is None:
            if n_cond:
                raise ShapeError(f"flow expects {n_cond} conditioning features")
            return np.zeros((n_rows, 0))
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = np.broadcast_to(values, (n_rows, values.shape[0]))
        if values.shape != (n_rows, n_cond):
            raise ShapeError(f"expected conditioning of shape {(n_rows, n_cond)}, got {values.shape}")
        if not n_cond:
            return values
        low = np.array([f.low for f in self.conditioning])
        high = np.array([f.high for f in self.conditioning])
        scaled = (values - low) / (high - low)
        bad = np.argwhere(~((scaled >= 0.0) & (scaled <= 1.0)))
        if bad.size:
            row, col = bad[0]
            raise DomainError(
                f"conditioning feature {self.conditioning[col].name} = {values[row, col]!r} "
                f"outside [{low[col]}, {high[col]}]"
            )
        return scaled

    def _check_points(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        bad = np.argwhere(~((x >= 0.0) & (x <= 1.0)))
        if bad.size:
            row, col = bad[0]
            raise DomainError(f"point {row} coordinate {col} = {x[row, col]!r} outside the unit cube")
        return x

    def forward(self, x: np.ndarray, cond: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, FlowCache]:
        """Latent point, log density of x and the cache for backward"""
        x = self._check_points(x)
        c = self.normalize_conditioning(cond, x.shape[0])
        log_q = np.zeros(x.shape[0])
        caches = []
        for layer in self.layers:
            x, log_det, cache = layer.forward(x, c)
            log_q += log_det
            caches.append(cache)
        return x, log_q, FlowCache(caches, log_q.shape[0])

    def backward(
        self, cache: FlowCache, g_logq: np.ndarray, g_z: Optional[np.ndarray] = None, input_gradient: bool = False
    ) -> Tuple[GradientSet, Optional[np.ndarray]]:
        """Gradients of sum(g_logq * log q + g_z * z) w.r.t. all parameters, in parameters() order"""
        g_logq = np.asarray(g_logq, dtype=np.float64)
        g = np.zeros((cache.n_rows, self.dim)) if g_z is None else np.asarray(g_z, dtype=np.float64)
        parts: List[GradientSet] = []
        for i in reversed(range(self.n_layers)):
            need_x = input_gradient or i > 0
            grads, g_prev = self.layers[i].backward(cache.layers[i], g, g_logq, input_gradient=need_x)
            parts.append(grads)
            g = g_prev
        return GradientSet.concat(reversed(parts)), g

    def log_pdf(self, x: np.ndarray, cond: Optional[np.ndarray] = None) -> np.ndarray:
        _, log_q, _ = self.forward(x, cond)
        return log_q

    def pdf(self, x: np.ndarray, cond: Optional[np.ndarray] = None) -> np.ndarray:
        return np.exp(self.log_pdf(x, cond))

    def sample(self, u: np.ndarray, cond: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Push latent points through the inverted layers in reverse; returns (x, pdf at x)"""
        x = self._check_points(u)
        c = self.normalize_conditioning(cond, x.shape[0])
        log_inv = np.zeros(x.shape[0])
        for layer in reversed(self.layers):
            x, log_det = layer.inverse(x, c)
            log_inv += log_det
        return x, np.exp(-log_inv)


def build_flow(spec: Optional[FlowSpec] = None, seed: int = 0, **fields) -> NormalizingFlow:
    """Fresh flow whose every warp starts as the identity

    Pass either a FlowSpec or its fields as keywords (dim, n_layers, kind, ...).
    """
    if spec is None:
        spec = parse_model(FlowSpec, fields)
    rng = philox_generator(seed, STREAM_OFFSETS["init"])
    n_cond = len(spec.conditioning)
    encoding_bins = spec.encoding_bins
    layers = []
    for i in range(spec.n_layers):
        mask_b = partition_b(spec.dim, i, spec.partition)
        transform = make_transform(spec.kind, spec.bins)
        n_in = network_input_width(spec.dim - len(mask_b), n_cond, encoding_bins)
        n_out = len(mask_b) * transform.params_per_dim
        if spec.dim - len(mask_b) == 0 and n_cond == 0:
            # constant input: the output bias holds the logits directly
            widths, links = [n_in, n_out], []
        else:
            widths, links = u_shape_widths(n_in, n_out, spec.outer_width, spec.nesting, spec.skips)
        net = xavier_init(widths, rng, links, dtype=spec.precision.value)
        layers.append(CouplingLayer(spec.dim, mask_b, transform, net, encoding_bins, n_cond))
    flow = NormalizingFlow(spec, layers)
    logger.info(
        f"Built {spec.kind.value} flow: D={spec.dim}, L={spec.n_layers}, K={spec.bins}, "
        f"{spec.partition.value} partition, {flow.parameter_count()} parameters"
    )
    return flow


def flow_pdf(flow: NormalizingFlow, x: np.ndarray, cond: Optional[np.ndarray] = None) -> np.ndarray:
    return flow.pdf(x, cond)


def flow_sample(flow: NormalizingFlow, u: np.ndarray, cond: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    return flow.sample(u, cond)

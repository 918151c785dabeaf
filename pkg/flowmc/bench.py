"""Benchmark targets, metrics, density grids and the adaptive-bin diagnostic."""

from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

from flowmc.errors import DomainError, InvalidConfigError, ShapeError
from flowmc.flow import NormalizingFlow
from flowmc.parallel import map_rows
from flowmc.rng import philox_generator
from flowmc.schemas import AppendixBGradients, DiagnoseSpec, MetricSet
from flowmc.training import Proposal

logger = logging.getLogger(__name__)

MAPE_EPSILON = 0.01
WEIGHT_QUANTILES = {"p50": 50.0, "p99": 99.0, "p9999": 99.99}


def _unconditioned() -> np.ndarray:
    return np.zeros((1, 0))


def _check_square(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != dim:
        raise ShapeError(f"expected {dim}-dimensional points, got shape {x.shape}")
    bad = np.argwhere(~((x >= 0.0) & (x <= 1.0)))
    if bad.size:
        row, col = bad[0]
        raise DomainError(f"point {row} coordinate {col} = {x[row, col]!r} outside the unit cube")
    return x


def bilinear(grid: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Texel-centre bilinear lookup with clamp-to-edge; x[:, 0] picks the column, x[:, 1] the row"""
    height, width = grid.shape
    px = np.clip(x[:, 0] * width - 0.5, 0.0, width - 1)
    py = np.clip(x[:, 1] * height - 0.5, 0.0, height - 1)
    j0 = np.minimum(np.floor(px).astype(np.int64), max(width - 2, 0))
    i0 = np.minimum(np.floor(py).astype(np.int64), max(height - 2, 0))
    j1 = np.minimum(j0 + 1, width - 1)
    i1 = np.minimum(i0 + 1, height - 1)
    tx = px - j0
    ty = py - i0
    bottom = grid[i0, j0] * (1.0 - tx) + grid[i0, j1] * tx
    top = grid[i1, j0] * (1.0 - tx) + grid[i1, j1] * tx
    return bottom * (1.0 - ty) + top * ty


class ImageTarget:
    """Grayscale grid on [0,1]^2; row 0 sits at the bottom (small x[:, 1])"""

    def __init__(self, grid: np.ndarray, name: str = "image"):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2:
            raise InvalidConfigError(f"image target must be a 2D grid, got shape {grid.shape}")
        if np.any(~np.isfinite(grid)) or np.any(grid < 0.0):
            raise InvalidConfigError(f"image target {name} has negative or non-finite values")
        if not np.any(grid > 0.0):
            raise InvalidConfigError(f"image target {name} has no positive value")
        self.grid = grid
        self.name = name
        self.contexts = _unconditioned()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    def evaluate(self, x: np.ndarray, cond: Optional[np.ndarray] = None, atom: Optional[np.ndarray] = None) -> np.ndarray:
        return bilinear(self.grid, _check_square(x, 2))


class StepTarget:
    """Density 0.5 below x[:, 0] = 0.5 and 1.5 above, in any dimension"""

    def __init__(self, dim: int = 2, low: float = 0.5, high: float = 1.5):
        self.dim = dim
        self.low = low
        self.high = high
        self.contexts = _unconditioned()

    def evaluate(self, x: np.ndarray, cond: Optional[np.ndarray] = None, atom: Optional[np.ndarray] = None) -> np.ndarray:
        x = _check_square(x, self.dim)
        return np.where(x[:, 0] < 0.5, self.low, self.high)


def image_target_eval(target: ImageTarget, x: np.ndarray) -> np.ndarray:
    return target.evaluate(x)


def _midpoints(resolution: int) -> np.ndarray:
    return (np.arange(resolution) + 0.5) / resolution


def _grid_points(resolution: int) -> np.ndarray:
    """Midpoints in row-major order: row i holds x[:, 1] = (i + 0.5) / resolution"""
    ticks = _midpoints(resolution)
    x0, x1 = np.meshgrid(ticks, ticks, indexing="xy")
    return np.stack([x0.ravel(), x1.ravel()], axis=1)


def _step_wedge(resolution: int) -> np.ndarray:
    x = _grid_points(resolution)
    steps = np.floor(x[:, 0] * 8.0) / 7.0
    band = (x[:, 1] > 0.2) & (x[:, 1] < 0.8)
    return np.where(band, 0.05 + steps, 0.02).reshape(resolution, resolution)


def _rings(resolution: int) -> np.ndarray:
    x = _grid_points(resolution)
    r = np.hypot(x[:, 0] - 0.5, x[:, 1] - 0.5)
    value = np.exp(-0.5 * ((r - 0.15) / 0.02) ** 2) + 0.6 * np.exp(-0.5 * ((r - 0.35) / 0.015) ** 2)
    return (value + 0.01).reshape(resolution, resolution)


def _filaments(resolution: int) -> np.ndarray:
    rng = philox_generator(20190, 0)
    x = _grid_points(resolution)
    value = np.full(x.shape[0], 0.01)
    for _ in range(6):
        centre = rng.uniform(0.15, 0.85, size=2)
        angle = rng.uniform(0.0, np.pi)
        direction = np.array([np.cos(angle), np.sin(angle)])
        offset = x - centre
        along = offset @ direction
        across = offset @ np.array([-direction[1], direction[0]])
        value += np.exp(-0.5 * (across / 0.01) ** 2 - 0.5 * (along / 0.2) ** 2)
        for _ in range(3):
            blob = centre + rng.normal(0.0, 0.08, size=2)
            value += 0.5 * np.exp(-0.5 * np.sum(((x - blob) / 0.015) ** 2, axis=1))
    return value.reshape(resolution, resolution)


def _step(resolution: int) -> np.ndarray:
    x = _grid_points(resolution)
    return np.where(x[:, 0] < 0.5, 0.5, 1.5).reshape(resolution, resolution)


def _constant(resolution: int) -> np.ndarray:
    return np.ones((resolution, resolution))


PROCEDURAL_TARGETS: Dict[str, Callable[[int], np.ndarray]] = {
    "step_wedge": _step_wedge,
    "rings": _rings,
    "filaments": _filaments,
    "step": _step,
    "constant": _constant,
}

SHIPPED_TARGETS = ("step_wedge", "rings", "filaments")


def procedural_target(name: str, resolution: int = 64) -> ImageTarget:
    if name not in PROCEDURAL_TARGETS:
        raise InvalidConfigError(f"unknown procedural target {name!r}; choose from {sorted(PROCEDURAL_TARGETS)}")
    return ImageTarget(PROCEDURAL_TARGETS[name](resolution), name=name)


def reference_density(target, resolution: int) -> np.ndarray:
    """Target sampled at grid midpoints and scaled to unit mean"""
    values = target.evaluate(_grid_points(resolution)).reshape(resolution, resolution)
    return values / np.mean(values)


def mape(rendered: np.ndarray, reference: np.ndarray, epsilon: float = MAPE_EPSILON) -> float:
    """Mean of |v - v_ref| / (v_ref + epsilon)"""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ShapeError(f"grid shapes differ: {rendered.shape} vs {reference.shape}")
    return float(np.mean(np.abs(rendered - reference) / (reference + epsilon)))


def cross_entropy(density: np.ndarray, reference: np.ndarray) -> float:
    """-integral of p log q over the unit square, p the normalized reference, on a midpoint grid"""
    density = np.asarray(density, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if density.shape != reference.shape:
        raise ShapeError(f"grid shapes differ: {density.shape} vs {reference.shape}")
    p = reference / np.mean(reference)
    with np.errstate(divide="ignore"):
        log_q = np.log(density)
    terms = np.where(p > 0.0, p * log_q, 0.0)
    return float(-np.mean(terms))


def density_grid(flow: NormalizingFlow, resolution: int, conditioning: Optional[Sequence[float]] = None) -> np.ndarray:
    """Flow density at grid midpoints; row i holds x[:, 1] = (i + 0.5) / resolution"""
    if resolution < 2:
        raise DomainError("density grid resolution must be at least 2")
    if flow.dim != 2:
        raise ShapeError(f"density grids need a 2D flow, got D={flow.dim}")
    cond = None if conditioning is None else np.asarray(conditioning, dtype=np.float64)

    def evaluate(rows: np.ndarray) -> np.ndarray:
        return flow.pdf(rows, cond)

    return map_rows(evaluate, _grid_points(resolution)).reshape(resolution, resolution)


def mc_weights(proposal: Proposal, target, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """f(X)/r(X) for X drawn from the proposal, spread evenly over the target's contexts"""
    contexts = np.asarray(target.contexts, dtype=np.float64)
    index = np.arange(n_samples) % contexts.shape[0]
    cond = contexts[index]
    draw = proposal.draw(cond, rng)
    f = np.asarray(target.evaluate(draw.x, cond, draw.atom), dtype=np.float64)
    return f / draw.pdf


def estimator_variance(proposal: Proposal, target, n_samples: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Sample mean and unbiased sample variance of the Monte Carlo weights"""
    if n_samples < 2:
        raise DomainError("estimator variance needs at least two samples")
    w = mc_weights(proposal, target, n_samples, rng)
    return float(np.mean(w)), float(np.var(w, ddof=1))


def weight_quantiles(weights: np.ndarray) -> Dict[str, float]:
    return {name: float(np.percentile(weights, q)) for name, q in WEIGHT_QUANTILES.items()}


def collect_metrics(
    proposal: Proposal,
    target,
    n_samples: int,
    rng: np.random.Generator,
    density: Optional[np.ndarray] = None,
    reference: Optional[np.ndarray] = None,
) -> MetricSet:
    w = mc_weights(proposal, target, n_samples, rng)
    metrics = MetricSet(
        estimator_mean=float(np.mean(w)),
        estimator_variance=float(np.var(w, ddof=1)),
        weight_quantiles=weight_quantiles(w),
    )
    if density is not None and reference is not None:
        metrics.mape = mape(density, reference)
        metrics.cross_entropy = cross_entropy(density, reference)
    return metrics


# 1D densities for the adaptive-bin diagnostic, with their discontinuities
DIAGNOSE_DENSITIES: Dict[str, Tuple[Callable[[float], float], List[float]]] = {
    "uniform": (lambda x: 1.0, []),
    "step": (lambda x: 2.0 if x < 0.5 else 0.0, [0.5]),
    "ramp": (lambda x: 2.0 * x, []),
}


def _integrate(p: Callable[[float], float], a: float, b: float, breaks: Sequence[float]) -> float:
    inside = [t for t in breaks if a < t < b]
    value, _ = quad(p, a, b, points=inside or None, epsabs=1e-13, epsrel=1e-12)
    return value


def appendix_b_gradients(
    theta: float, q1: float, q2: float, p: Callable[[float], float], breaks: Sequence[float] = ()
) -> AppendixBGradients:
    """Gradients of the KL loss w.r.t. the inner bin edge of a two-bin adaptive piecewise-linear warp

    Returns the density-normalized expectation (gradient moved inside the
    integral, which a discontinuous pdf does not allow), the mass-normalized
    variant and the exact derivative of the cross-entropy.
    """
    if not 0.0 < theta < 1.0:
        raise DomainError(f"bin edge theta must lie in (0, 1), got {theta}")
    if q1 <= 0.0 or q2 <= 0.0:
        raise DomainError("bin values Q1 and Q2 must be positive")
    left = _integrate(p, 0.0, theta, breaks)
    right = _integrate(p, theta, 1.0, breaks)
    density_norm = (1.0 - q2 / q1) * left + (q1 / q2 - 1.0) * right
    mass_norm = left / theta - right / (1.0 - theta)
    s = q1 * theta + q2 * (1.0 - theta)
    exact = -p(theta) * np.log(q1 / q2) + (left + right) * (q1 - q2) / s
    return AppendixBGradients(
        theta=theta, density_norm_grad=density_norm, mass_norm_grad=mass_norm, exact_grad=float(exact)
    )


def appendix_b_curve(spec: DiagnoseSpec) -> List[AppendixBGradients]:
    p, breaks = DIAGNOSE_DENSITIES[spec.target]
    thetas = np.linspace(spec.theta_min, spec.theta_max, spec.theta_count)
    return [appendix_b_gradients(float(t), spec.q1, spec.q2, p, breaks) for t in thetas]


class GaussianMixtureTarget:
    """Diagonal Gaussian mixture restricted to [0,1]^D with exact normalization"""

    def __init__(self, weights, means, sigmas, permutation: Optional[Sequence[int]] = None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        self.dim = self.means.shape[1]
        self.permutation = list(permutation) if permutation is not None else list(range(self.dim))
        self.contexts = _unconditioned()

    @property
    def normalization(self) -> float:
        """Integral over the unit cube"""
        inside = ndtr((1.0 - self.means) / self.sigmas) - ndtr(-self.means / self.sigmas)
        return float(np.sum(self.weights * np.prod(inside, axis=1)))

    def evaluate(self, x: np.ndarray, cond: Optional[np.ndarray] = None, atom: Optional[np.ndarray] = None) -> np.ndarray:
        x = _check_square(x, self.dim)
        total = np.zeros(x.shape[0])
        for w, mean, sigma in zip(self.weights, self.means, self.sigmas):
            z = (x - mean) / sigma
            log_g = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(sigma)) - 0.5 * self.dim * np.log(2.0 * np.pi)
            total += w * np.exp(log_g)
        return total


def pss_synthetic_target(dim: int) -> GaussianMixtureTarget:
    """Three anisotropic components whose means and widths read the same reversed"""
    if dim % 2 or not 4 <= dim <= 8:
        raise InvalidConfigError(f"synthetic primary-sample-space target needs an even D in [4, 8], got {dim}")
    mirrored = np.array([min(d, dim - 1 - d) for d in range(dim)], dtype=np.float64)
    means = np.stack([0.25 + 0.1 * mirrored, 0.7 - 0.05 * mirrored, np.full(dim, 0.5)])
    sigmas = np.stack([0.08 + 0.02 * mirrored, np.full(dim, 0.12), 0.05 + 0.05 * mirrored])
    weights = [0.5, 0.3, 0.2]
    return GaussianMixtureTarget(weights, means, sigmas, permutation=list(reversed(range(dim))))

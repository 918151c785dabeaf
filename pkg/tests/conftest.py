from typing import Callable, List
import numpy as np
import pytest

from flowmc.flow import build_flow
from flowmc.rng import philox_generator


def perturb(owner, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Add Gaussian noise to every parameter so warps are no longer the identity"""
    for p in owner.parameters():
        p += rng.normal(0.0, scale, size=p.shape)
    owner.bump_version()


def numeric_gradient(loss: Callable[[], float], params: List[np.ndarray], eps: float = 1e-6) -> List[np.ndarray]:
    """Central differences of a scalar loss w.r.t. every entry, perturbing in place"""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = loss()
            flat[i] = original - eps
            down = loss()
            flat[i] = original
            g_flat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: List[np.ndarray], numeric: List[np.ndarray]) -> float:
    a = np.concatenate([t.ravel() for t in analytic])
    n = np.concatenate([t.ravel() for t in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


@pytest.fixture
def rng():
    return philox_generator(1234, 0)


@pytest.fixture
def small_flow_factory(rng):
    """Small perturbed flows; pass FlowSpec fields as keywords"""

    def make(scale: float = 0.3, **fields):
        defaults = {"dim": 2, "n_layers": 2, "bins": 4, "outer_width": 8, "nesting": 1, "one_blob_bins": 4}
        defaults.update(fields)
        flow = build_flow(seed=7, **defaults)
        perturb(flow, rng, scale)
        return flow

    return make

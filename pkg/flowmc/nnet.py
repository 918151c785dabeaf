"""Fully connected networks with exact backpropagation and Adam.

Networks are stacks of affine layers with rectifiers on every hidden level
and an identity output. Optional concatenation skips link mirrored levels
of a U-shaped stack: a skip (src, dst) appends the activations of level
`src` to the input of the layer that consumes level `dst`.
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple, Union
import logging
import numpy as np

from flowmc.errors import InvalidConfigError, NonFiniteGradientError, ShapeError

logger = logging.getLogger(__name__)

SkipLink = Tuple[int, int]


class Parametric(Protocol):
    """Anything that exposes its trainable tensors as a flat list"""

    def parameters(self) -> List[np.ndarray]:
        ...

    def bump_version(self) -> None:
        ...


@dataclass
class GradientSet:
    """One gradient tensor per parameter tensor, in parameters() order"""

    tensors: List[np.ndarray]

    @classmethod
    def zeros_like(cls, owner: Parametric) -> "GradientSet":
        return cls([np.zeros_like(p) for p in owner.parameters()])

    @classmethod
    def concat(cls, parts: Iterable["GradientSet"]) -> "GradientSet":
        tensors: List[np.ndarray] = []
        for part in parts:
            tensors.extend(part.tensors)
        return cls(tensors)

    def split(self, sizes: Sequence[int]) -> List["GradientSet"]:
        """Inverse of concat given the tensor count of each part"""
        out, start = [], 0
        for size in sizes:
            out.append(GradientSet(self.tensors[start:start + size]))
            start += size
        return out

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(t))) for t in self.tensors)))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet([t * factor for t in self.tensors])

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t))) for t in self.tensors)

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self.tensors])


@dataclass
class MlpCache:
    """Activations kept by a forward pass for the matching backward pass"""

    version: int
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]


class Mlp:
    """Fully connected network: rectified hidden levels, identity output"""

    def __init__(
        self,
        layer_widths: Sequence[int],
        weights: List[np.ndarray],
        biases: List[np.ndarray],
        skip_links: Sequence[SkipLink] = (),
        dtype: Union[str, np.dtype] = np.float64,
    ):
        self.layer_widths = [int(w) for w in layer_widths]
        self.skip_links = [(int(s), int(d)) for s, d in skip_links]
        self.dtype = np.dtype(dtype)
        self.weights = [np.asarray(w, dtype=self.dtype) for w in weights]
        self.biases = [np.asarray(b, dtype=self.dtype) for b in biases]
        self.version = 0
        self._validate()

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def fan_in(self, layer: int) -> int:
        """Input width of `layer` including concatenated skips"""
        extra = sum(self.layer_widths[s] for s, d in self.skip_links if d == layer)
        return self.layer_widths[layer] + extra

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def parameter_names(self) -> List[str]:
        names: List[str] = []
        for i in range(self.n_layers):
            names.extend([f"W{i}", f"b{i}"])
        return names

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "Mlp":
        net = Mlp(self.layer_widths, [w.copy() for w in self.weights],
                  [b.copy() for b in self.biases], self.skip_links, self.dtype)
        net.version = self.version
        return net

    def _validate(self) -> None:
        if len(self.layer_widths) < 2:
            raise ShapeError("network needs at least an input and an output width")
        for s, d in self.skip_links:
            if not 0 <= s < d <= self.n_layers - 1:
                raise ShapeError(f"invalid skip link ({s}, {d}) for {self.n_layers} layers")
        if len(self.weights) != self.n_layers or len(self.biases) != self.n_layers:
            raise ShapeError("one weight matrix and bias vector per layer required")
        for i in range(self.n_layers):
            expected = (self.fan_in(i), self.layer_widths[i + 1])
            if self.weights[i].shape != expected:
                raise ShapeError(f"layer {i} weight shape {self.weights[i].shape} != {expected}")
            if self.biases[i].shape != (expected[1],):
                raise ShapeError(f"layer {i} bias shape {self.biases[i].shape} != {(expected[1],)}")

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
        x = np.asarray(inputs, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected input of width {self.input_width}, got shape {x.shape}")
        activations = [x]
        layer_inputs: List[np.ndarray] = []
        pre_activations: List[np.ndarray] = []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            parts = [activations[i]] + [activations[s] for s, d in self.skip_links if d == i]
            z = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
            pre = z @ self.weights[i] + self.biases[i]
            layer_inputs.append(z)
            pre_activations.append(pre)
            activations.append(pre if i == last else np.maximum(pre, 0.0))
        cache = MlpCache(self.version, layer_inputs, pre_activations, activations)
        return activations[-1], cache

    def backward(
        self, cache: MlpCache, output_gradient: np.ndarray, input_gradient: bool = False
    ) -> Tuple[GradientSet, Optional[np.ndarray]]:
        """Gradients of sum(output * output_gradient) for every parameter (and the input)"""
        if cache.version != self.version:
            raise ShapeError("stale activation cache: parameters changed since the forward pass")
        g_out = np.asarray(output_gradient, dtype=self.dtype)
        if g_out.shape != cache.activations[-1].shape:
            raise ShapeError(f"output gradient shape {g_out.shape} != {cache.activations[-1].shape}")

        g_acts: List[Optional[np.ndarray]] = [None] * (self.n_layers + 1)
        g_acts[-1] = g_out
        g_weights: List[np.ndarray] = [None] * self.n_layers  # type: ignore[list-item]
        g_biases: List[np.ndarray] = [None] * self.n_layers  # type: ignore[list-item]
        last = self.n_layers - 1
        for i in reversed(range(self.n_layers)):
            g_a = g_acts[i + 1]
            if g_a is None:
                g_a = np.zeros_like(cache.activations[i + 1])
            # subgradient 0 at the kink
            g_pre = g_a if i == last else g_a * (cache.pre_activations[i] > 0.0)
            g_weights[i] = cache.inputs[i].T @ g_pre
            g_biases[i] = g_pre.sum(axis=0)
            if i == 0 and not input_gradient:
                continue
            g_z = g_pre @ self.weights[i].T
            sources = [i] + [s for s, d in self.skip_links if d == i]
            start = 0
            for level in sources:
                width = self.layer_widths[level]
                part = g_z[:, start:start + width]
                start += width
                g_acts[level] = part if g_acts[level] is None else g_acts[level] + part

        tensors: List[np.ndarray] = []
        for gw, gb in zip(g_weights, g_biases):
            tensors.extend([gw, gb])
        g_input = None
        if input_gradient:
            g_input = g_acts[0] if g_acts[0] is not None else np.zeros_like(cache.activations[0])
        return GradientSet(tensors), g_input


def u_shape_widths(
    input_width: int, output_width: int, outer_width: int = 64, nesting: int = 4, skips: bool = True
) -> Tuple[List[int], List[SkipLink]]:
    """Level widths and skip links of a U-shaped stack with input/output adapters

    The stack is: input adapter to `outer_width`, `nesting` levels halving the
    width, the mirrored `nesting` levels doubling it back, output adapter.
    """
    if outer_width < 1 or nesting < 1:
        raise InvalidConfigError("outer_width and nesting must be positive")
    down = [max(1, outer_width >> j) for j in range(nesting)]
    widths = [input_width, outer_width] + down + down[::-1] + [output_width]
    links: List[SkipLink] = []
    if skips:
        for j in range(1, nesting):
            links.append((1 + j, 1 + 2 * nesting - j))
    return widths, links


def xavier_init(
    widths: Sequence[int],
    seed: Union[int, np.random.Generator],
    skip_links: Sequence[SkipLink] = (),
    dtype: Union[str, np.dtype] = np.float64,
    zero_output: bool = True,
) -> Mlp:
    """Xavier-normal weights (variance 2/(fan_in+fan_out)), zero biases, zeroed output layer"""
    widths = list(widths)
    if not widths or len(widths) < 2 or any(int(w) <= 0 for w in widths):
        raise InvalidConfigError(f"layer widths must be at least two positive integers, got {widths}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    n_layers = len(widths) - 1
    fan_ins = [widths[i] + sum(widths[s] for s, d in skip_links if d == i) for i in range(n_layers)]
    weights, biases = [], []
    for i in range(n_layers):
        fan_in, fan_out = fan_ins[i], widths[i + 1]
        std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(0.0, std, size=(fan_in, fan_out))
        if zero_output and i == n_layers - 1:
            w = np.zeros_like(w)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(widths, weights, biases, skip_links, dtype)


def mlp_forward(net: Mlp, inputs: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    return net.forward(inputs)


def mlp_backward(net: Mlp, cache: MlpCache, output_gradient: np.ndarray) -> GradientSet:
    grads, _ = net.backward(cache, output_gradient)
    return grads


@dataclass
class AdamState:
    """Optimizer moments for one Parametric owner"""

    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_owner(
        cls,
        owner: Parametric,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        params = owner.parameters()
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(owner: Parametric, state: AdamState, grads: GradientSet) -> None:
    """Bias-corrected Adam update applied in place"""
    params = owner.parameters()
    if len(params) != len(grads.tensors) or len(params) != len(state.first_moment):
        raise ShapeError("gradient set does not match the parameter list")
    for p, g in zip(params, grads.tensors):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if not grads.is_finite():
        logger.warning("Rejecting Adam step: gradient contains non-finite values")
        raise NonFiniteGradientError("non-finite gradient component, step rejected")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads.tensors, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    owner.bump_version()


def clip_global_norm(grads: GradientSet, max_norm: float) -> GradientSet:
    if max_norm <= 0:
        raise InvalidConfigError("max_norm must be positive")
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads
    return grads.scaled(max_norm / norm)


class ParameterGroup:
    """Several Parametric owners optimized as one"""

    def __init__(self, owners: Sequence[Parametric]):
        self.owners = list(owners)

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for owner in self.owners:
            params.extend(owner.parameters())
        return params

    def bump_version(self) -> None:
        for owner in self.owners:
            owner.bump_version()

"""MIS-aware optimization of a flow combined with an analytic technique.

Each sample picks the flow with probability c (predicted per conditioning
context by a selection network) and the analytic technique otherwise. The
estimator divides by the balance-heuristic mixture q' = c q + (1 - c) p_a,
and training blends the divergence to q with the divergence to q'.

The benchmark stands in for a renderer: the analytic technique is a
truncated Gaussian lobe (optionally with a point mass at its centre) and
the integrand is the lobe times a radiance mixture wrapped in the first
coordinate.
"""

from copy import deepcopy
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple
import logging
import numpy as np
from scipy.special import expit, ndtr, ndtri

from flowmc.encoding import encode_columns
from flowmc.errors import DegenerateDensityError
from flowmc.flow import NormalizingFlow
from flowmc.models import GuidingVariant, LossKind
from flowmc.nnet import GradientSet, Mlp, ParameterGroup, u_shape_widths, xavier_init
from flowmc.schemas import ConditioningFeature, MisSpec, ScenarioSpec, StepMetrics, TrainConfig
from flowmc.training import Batch, ProposalDraw, ReplayBuffer, Trainer, loss_weight
from flowmc.transforms.base import ONE_MINUS

logger = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
WRAP_SHIFTS = (-1.0, 0.0, 1.0)
# learned selection probabilities stay inside [SELECTION_EPS, 1 - SELECTION_EPS]
SELECTION_EPS = 1e-9


def blend_beta(tau) -> np.ndarray:
    """Weight of the plain-q divergence after a fraction tau of the budget"""
    return 0.5 * (1.0 / 3.0) ** (5.0 * np.asarray(tau, dtype=np.float64))


def _bounded_selection(logits: np.ndarray) -> np.ndarray:
    return np.clip(expit(logits), SELECTION_EPS, 1.0 - SELECTION_EPS)


def effective_pdf(q_val, analytic_val, c):
    """Balance-heuristic density of the one-sample mixture"""
    return c * q_val + (1.0 - c) * analytic_val


def guiding_features(n_scenes: int) -> List[ConditioningFeature]:
    """Conditioning of the guiding benchmark: lobe centre, lobe width and scene id"""
    return [
        ConditioningFeature(name="lobe_u", low=0.0, high=1.0),
        ConditioningFeature(name="lobe_v", low=0.0, high=1.0),
        ConditioningFeature(name="lobe_sigma", low=0.0, high=0.5),
        ConditioningFeature(name="scene_id", low=0.0, high=float(max(1, n_scenes - 1))),
    ]


def scenario_contexts(scenarios: Sequence[ScenarioSpec]) -> np.ndarray:
    return np.array([[s.lobe_u, s.lobe_v, s.lobe_sigma, float(i)] for i, s in enumerate(scenarios)])


def _truncated_bounds(mu: np.ndarray, sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return ndtr(-mu / sigma), ndtr((1.0 - mu) / sigma)


def truncated_normal_pdf(x, mu, sigma) -> np.ndarray:
    lo, hi = _truncated_bounds(mu, sigma)
    z = (x - mu) / sigma
    return np.exp(-0.5 * z * z) * _INV_SQRT_2PI / (sigma * (hi - lo))


def truncated_normal_sample(u, mu, sigma) -> np.ndarray:
    """Inverse-CDF sample of N(mu, sigma) restricted to [0, 1]"""
    lo, hi = _truncated_bounds(mu, sigma)
    return np.clip(mu + sigma * ndtri(lo + u * (hi - lo)), 0.0, ONE_MINUS)


class LobeTechnique:
    """Analytic technique: product of truncated Gaussians around the lobe centre

    With probability `atom_probability` (per scene) it emits the lobe centre
    itself, a point mass no continuous density can represent.
    """

    def __init__(self, atom_probabilities: Sequence[float]):
        self.atom_probabilities = np.asarray(atom_probabilities, dtype=np.float64)

    @property
    def has_atoms(self) -> bool:
        return bool(np.any(self.atom_probabilities > 0.0))

    def _params(self, cond: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        mu = cond[:, 0:2]
        sigma = cond[:, 2:3]
        alpha = self.atom_probabilities[cond[:, 3].astype(np.int64)]
        return mu, sigma, alpha

    def atom_location(self, cond: np.ndarray) -> np.ndarray:
        return np.minimum(cond[:, 0:2], ONE_MINUS)

    def atom_mass(self, cond: np.ndarray) -> np.ndarray:
        return self._params(cond)[2]

    def lobe_pdf(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        mu, sigma, _ = self._params(cond)
        return np.prod(truncated_normal_pdf(x, mu, sigma), axis=1)

    def pdf(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Continuous part of the technique's density"""
        _, _, alpha = self._params(cond)
        return (1.0 - alpha) * self.lobe_pdf(x, cond)

    def sample(self, u: np.ndarray, cond: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Points and atom flags; the first uniform picks the atom and is then reused"""
        mu, sigma, alpha = self._params(cond)
        atom = u[:, 0] < alpha
        u = u.copy()
        u[:, 0] = np.where(atom, 0.0, (u[:, 0] - alpha) / (1.0 - alpha))
        x = truncated_normal_sample(u, mu, sigma)
        x[atom] = self.atom_location(cond[atom])
        return x, atom


class RadianceMixture:
    """Gaussian mixture on the unit square, periodic in the first coordinate"""

    def __init__(self, weights, means, sigmas):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)

    @classmethod
    def from_scenario(cls, scenario: ScenarioSpec) -> "RadianceMixture":
        return cls(
            [c.weight for c in scenario.radiance],
            [c.mean for c in scenario.radiance],
            [c.sigma for c in scenario.radiance],
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        total = np.zeros(x.shape[0])
        for w, mean, sigma in zip(self.weights, self.means, self.sigmas):
            z1 = (x[:, 1] - mean[1]) / sigma[1]
            g1 = np.exp(-0.5 * z1 * z1) * _INV_SQRT_2PI / sigma[1]
            g0 = np.zeros(x.shape[0])
            for shift in WRAP_SHIFTS:
                z0 = (x[:, 0] - mean[0] - shift) / sigma[0]
                g0 += np.exp(-0.5 * z0 * z0) * _INV_SQRT_2PI / sigma[0]
            total += w * g0 * g1
        return total


class GuidingTarget:
    """Lobe times radiance for each scenario; atom samples carry the point mass"""

    def __init__(self, scenarios: Sequence[ScenarioSpec]):
        self.scenarios = list(scenarios)
        self.technique = LobeTechnique([s.atom_probability for s in self.scenarios])
        self.radiance = [RadianceMixture.from_scenario(s) for s in self.scenarios]
        self.contexts = scenario_contexts(self.scenarios)

    def _radiance(self, x: np.ndarray, scene: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[0])
        for i, field in enumerate(self.radiance):
            rows = scene == i
            if np.any(rows):
                out[rows] = field(x[rows])
        return out

    def evaluate(self, x: np.ndarray, cond: np.ndarray, atom: Optional[np.ndarray] = None) -> np.ndarray:
        scene = cond[:, 3].astype(np.int64)
        f = self.technique.pdf(x, cond) * self._radiance(x, scene)
        if atom is not None and np.any(atom):
            centre = self.technique.atom_location(cond[atom])
            f[atom] = self.technique.atom_mass(cond[atom]) * self._radiance(centre, scene[atom])
        return f

    def reference(self, scene: int, resolution: int = 1024) -> Tuple[float, float]:
        """Integral and analytic-only estimator variance by midpoint quadrature"""
        cond = np.repeat(self.contexts[scene:scene + 1], resolution * resolution, axis=0)
        ticks = (np.arange(resolution) + 0.5) / resolution
        x = np.stack(np.meshgrid(ticks, ticks, indexing="xy"), axis=-1).reshape(-1, 2)
        lobe = self.technique.lobe_pdf(x, cond)
        radiance = self.radiance[scene](x)
        cell = 1.0 / (resolution * resolution)
        # normalize the truncated lobe on the grid so both moments use the same measure
        lobe_mass = np.sum(lobe) * cell
        first = np.sum(lobe * radiance) * cell / lobe_mass
        second = np.sum(lobe * radiance * radiance) * cell / lobe_mass
        alpha = float(self.scenarios[scene].atom_probability)
        centre = self.technique.atom_location(self.contexts[scene:scene + 1])
        at_centre = float(self.radiance[scene](centre)[0])
        integral = (1.0 - alpha) * first + alpha * at_centre
        variance = (1.0 - alpha) * second + alpha * at_centre ** 2 - integral ** 2
        return float(integral), float(variance)


@dataclass
class MisDraw:
    x: np.ndarray
    q: np.ndarray
    analytic: np.ndarray
    c: np.ndarray
    q_eff: np.ndarray
    atom: np.ndarray


class MisSetup:
    """Flow, analytic technique and selection network sharing one conditioning spec"""

    def __init__(
        self,
        flow: NormalizingFlow,
        analytic: LobeTechnique,
        selection_net: Optional[Mlp],
        fixed_selection: Optional[float] = None,
    ):
        self.flow = flow
        self.analytic = analytic
        self.selection_net = selection_net
        self.fixed_selection = fixed_selection
        self.encoding_bins = flow.spec.encoding_bins

    @property
    def atom_flag(self) -> bool:
        return self.analytic.has_atoms

    @property
    def learns_selection(self) -> bool:
        return self.fixed_selection is None

    def copy(self) -> "MisSetup":
        return deepcopy(self)

    def selection_features(self, cond: np.ndarray) -> np.ndarray:
        scaled = self.flow.normalize_conditioning(cond, cond.shape[0])
        return encode_columns(scaled, self.encoding_bins)

    def selection_logits(self, cond: np.ndarray):
        out, cache = self.selection_net.forward(self.selection_features(cond))
        return out[:, 0].astype(np.float64), cache

    def selection(self, cond: np.ndarray) -> np.ndarray:
        if self.fixed_selection is not None:
            return np.full(cond.shape[0], float(self.fixed_selection))
        logits, _ = self.selection_logits(cond)
        return _bounded_selection(logits)


def build_selection_net(n_features: int, encoding_bins: Optional[int], spec: MisSpec, rng) -> Mlp:
    n_in = max(1, n_features * (encoding_bins or 1))
    widths, links = u_shape_widths(n_in, 1, spec.selection_outer_width, spec.selection_nesting)
    return xavier_init(widths, rng, links)


def build_mis_setup(
    flow: NormalizingFlow, analytic: LobeTechnique, spec: MisSpec, variant: GuidingVariant, rng
) -> MisSetup:
    fixed = {
        GuidingVariant.FLOW_ONLY: 1.0,
        GuidingVariant.ANALYTIC_ONLY: 0.0,
        GuidingVariant.MIS_FIXED: spec.fixed_selection,
        GuidingVariant.MIS_LEARNED: None,
    }[GuidingVariant(variant)]
    net = build_selection_net(len(flow.conditioning), flow.spec.encoding_bins, spec, rng)
    return MisSetup(flow, analytic, net, fixed)


def selection_prob(setup: MisSetup, conditioning: np.ndarray) -> np.ndarray:
    return setup.selection(np.atleast_2d(conditioning))


def mis_draw(setup: MisSetup, u_select: np.ndarray, u_sample: np.ndarray, cond: np.ndarray) -> MisDraw:
    """One-sample MIS draw with both densities recorded"""
    n = cond.shape[0]
    c = setup.selection(cond)
    use_flow = u_select < c
    x = np.zeros((n, setup.flow.dim))
    atom = np.zeros(n, dtype=bool)
    if np.any(use_flow):
        x[use_flow], _ = setup.flow.sample(u_sample[use_flow], cond[use_flow])
    if np.any(~use_flow):
        x[~use_flow], atom[~use_flow] = setup.analytic.sample(u_sample[~use_flow], cond[~use_flow])
    cont = ~atom
    q = np.zeros(n)
    if np.any(cont) and setup.fixed_selection != 0.0:
        q[cont] = setup.flow.pdf(x[cont], cond[cont])
    analytic = np.zeros(n)
    analytic[cont] = setup.analytic.pdf(x[cont], cond[cont])
    analytic[atom] = setup.analytic.atom_mass(cond[atom])
    q_eff = np.where(atom, (1.0 - c) * analytic, effective_pdf(q, analytic, c))
    if np.any(~(q_eff > 0.0)):
        raise DegenerateDensityError("effective density is zero at a sampled point")
    return MisDraw(x, q, analytic, c, q_eff, atom)


def one_sample_estimate(
    setup: MisSetup,
    u_select: np.ndarray,
    u_sample: np.ndarray,
    conditioning: np.ndarray,
    target_f: Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray],
) -> Tuple[np.ndarray, MisDraw]:
    """Per-sample values f/q' and the draw records used for training"""
    draw = mis_draw(setup, u_select, u_sample, conditioning)
    f = target_f(draw.x, conditioning, draw.atom)
    return f / draw.q_eff, draw


@dataclass
class BlendedLoss:
    loss: float
    flow_grads: GradientSet
    selection_grads: Optional[GradientSet]


def blended_loss(
    setup: MisSetup,
    batch: Batch,
    tau: float,
    loss: LossKind = LossKind.KL,
    beta: Optional[float] = None,
) -> BlendedLoss:
    """beta D(p||q) + (1 - beta) D(p||q') and its gradients for both networks

    Atom samples have no flow density: only the q' term of the selection
    probability sees them.
    """
    n = len(batch)
    beta = float(blend_beta(tau)) if beta is None else float(beta)
    atom = batch.atom
    cont = ~atom
    flow = setup.flow
    q = np.zeros(n)
    log_q = np.zeros(n)
    cache = None
    if np.any(cont):
        cond_c = batch.cond[cont] if flow.conditioning else None
        _, log_q[cont], cache = flow.forward(batch.x[cont], cond_c)
        q[cont] = np.exp(log_q[cont])

    if setup.learns_selection:
        logits, sel_cache = setup.selection_logits(batch.cond)
        c = _bounded_selection(logits)
    else:
        c = np.full(n, float(setup.fixed_selection))
    a = batch.analytic_pdf
    q_eff = np.where(atom, (1.0 - c) * a, effective_pdf(q, a, c))

    w_eff = loss_weight(batch.f_est, batch.proposal_pdf, q_eff, loss)
    w_q = np.zeros(n)
    if np.any(cont):
        w_q[cont] = loss_weight(batch.f_est[cont], batch.proposal_pdf[cont], q[cont], loss)
    log_q_eff = np.log(q_eff)
    per_sample = -(1.0 - beta) * w_eff * log_q_eff - beta * np.where(cont, w_q * log_q, 0.0)
    value = float(np.mean(per_sample))

    flow_grads = GradientSet.zeros_like(flow)
    if cache is not None:
        d_eff_d_logq = c[cont] * q[cont] / q_eff[cont]
        g_logq = -(beta * w_q[cont] + (1.0 - beta) * w_eff[cont] * d_eff_d_logq) / n
        flow_grads, _ = flow.backward(cache, g_logq)

    selection_grads = None
    if setup.learns_selection:
        d_eff_dc = np.where(atom, -1.0 / (1.0 - c), (q - a) / q_eff)
        g_c = -(1.0 - beta) * w_eff * d_eff_dc / n
        g_logit = g_c * c * (1.0 - c)
        selection_grads, _ = setup.selection_net.backward(sel_cache, g_logit[:, None])
    return BlendedLoss(value, flow_grads, selection_grads)


class MisProposal:
    """One-sample MIS sampler over the last published setup snapshot"""

    needs_snapshot = True

    def __init__(self, setup: MisSetup):
        self.setup = setup

    def draw(self, cond: np.ndarray, rng: np.random.Generator) -> ProposalDraw:
        n = cond.shape[0]
        u_select = rng.random(n)
        u_sample = rng.random((n, self.setup.flow.dim))
        d = mis_draw(self.setup, u_select, u_sample, cond)
        return ProposalDraw(d.x, d.q_eff, d.analytic, d.atom)

    def update(self, snapshot: MisSetup) -> None:
        self.setup = snapshot


class MisTrainer(Trainer):
    """Trains the flow, and the selection network when c is learned, on the blended loss"""

    def __init__(self, setup: MisSetup, cfg: TrainConfig):
        self.setup = setup
        owner = ParameterGroup([setup.flow, setup.selection_net]) if setup.learns_selection else setup.flow
        super().__init__(setup.flow, cfg, owner=owner)

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator) -> StepMetrics:
        batch = buffer.sample(self.cfg.batch_size, rng)
        try:
            result = blended_loss(self.setup, batch, self.progress, self.cfg.loss)
        except DegenerateDensityError as e:
            self.total_steps += 1
            return self._reject(e.message)
        parts = [result.flow_grads]
        if result.selection_grads is not None:
            parts.append(result.selection_grads)
        return self.apply(result.loss, GradientSet.concat(parts))

    def snapshot(self) -> MisSetup:
        return self.setup.copy()

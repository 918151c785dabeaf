"""Online training of flows from noisy, unnormalized integrand estimates.

Samples are drawn in power-of-two iterations, evaluated, pushed to a replay
buffer and immediately used for minibatch gradient steps. The KL and
chi-square losses share one code path: the per-sample loss is -w log q(x)
with a detached Monte Carlo weight w.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence, Tuple
import logging
import threading
import time
import numpy as np
from tqdm import tqdm

from flowmc.config import get_settings
from flowmc.errors import (
    DegenerateDensityError,
    DomainError,
    FlowMCError,
    InvalidConfigError,
    NonFiniteGradientError,
    TargetEvaluationError,
)
from flowmc.flow import NormalizingFlow
from flowmc.models import LossKind, ProposalKind
from flowmc.nnet import AdamState, GradientSet, Parametric, adam_step, clip_global_norm
from flowmc.rng import RngStreams
from flowmc.schemas import ExperimentReport, IterationRecord, ScheduleSpec, StepMetrics, TrainConfig, TrainRecord

logger = logging.getLogger(__name__)

ZERO_VARIANCE_WEIGHT = 1e12


def loss_weight(f_est, proposal_pdf, q_val, loss: LossKind = LossKind.KL) -> np.ndarray:
    """Detached Monte Carlo weight of each sample for the chosen divergence

    KL uses f/r and chi-square uses f^2/(r q), where r is the density the
    sample was drawn from; with r = q these are f/q and (f/q)^2.
    """
    f_est = np.asarray(f_est, dtype=np.float64)
    proposal_pdf = np.asarray(proposal_pdf, dtype=np.float64)
    q_val = np.asarray(q_val, dtype=np.float64)
    if np.any(~(q_val > 0.0)):
        raise DegenerateDensityError("flow density is not positive at a training sample")
    if np.any(~(proposal_pdf > 0.0)):
        raise DegenerateDensityError("proposal density is not positive at a training sample")
    if LossKind(loss) == LossKind.CHI2:
        return f_est * f_est / (proposal_pdf * q_val)
    return f_est / proposal_pdf


@dataclass
class Batch:
    x: np.ndarray
    cond: np.ndarray
    f_est: np.ndarray
    proposal_pdf: np.ndarray
    analytic_pdf: np.ndarray
    atom: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


class ReplayBuffer:
    """Bounded FIFO store of training records, safe for one producer and one consumer"""

    def __init__(self, capacity: int, dim: int, n_cond: int = 0):
        if capacity < 1:
            raise InvalidConfigError("replay buffer capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.n_cond = int(n_cond)
        self._x = np.zeros((self.capacity, self.dim))
        self._cond = np.zeros((self.capacity, self.n_cond))
        self._f = np.zeros(self.capacity)
        self._pdf = np.ones(self.capacity)
        self._analytic = np.zeros(self.capacity)
        self._atom = np.zeros(self.capacity, dtype=bool)
        self._head = 0
        self._size = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return self._size

    def push(self, record: TrainRecord) -> None:
        self.push_batch(
            np.array([record.x]),
            np.array([record.conditioning]).reshape(1, -1),
            np.array([record.f_est]),
            np.array([record.proposal_pdf]),
            np.array([record.analytic_pdf]),
            np.array([record.atom]),
        )

    def push_batch(
        self,
        x: np.ndarray,
        cond: np.ndarray,
        f_est: np.ndarray,
        proposal_pdf: np.ndarray,
        analytic_pdf: Optional[np.ndarray] = None,
        atom: Optional[np.ndarray] = None,
    ) -> None:
        n = x.shape[0]
        if analytic_pdf is None:
            analytic_pdf = np.zeros(n)
        if atom is None:
            atom = np.zeros(n, dtype=bool)
        if x.shape != (n, self.dim) or cond.shape != (n, self.n_cond):
            raise DomainError(f"records of shape {x.shape}/{cond.shape} do not fit a ({self.dim}, {self.n_cond}) buffer")
        if np.any(~np.isfinite(f_est)) or np.any(f_est < 0.0):
            raise DomainError("integrand estimates must be finite and nonnegative")
        if np.any(~(proposal_pdf > 0.0)) or np.any(~np.isfinite(proposal_pdf)):
            raise DomainError("proposal densities must be finite and positive")
        if n > self.capacity:
            keep = slice(n - self.capacity, n)
            x, cond, f_est, proposal_pdf = x[keep], cond[keep], f_est[keep], proposal_pdf[keep]
            analytic_pdf, atom = analytic_pdf[keep], atom[keep]
            n = self.capacity
        with self._lock:
            slots = (self._head + np.arange(n)) % self.capacity
            self._x[slots] = x
            self._cond[slots] = cond
            self._f[slots] = f_est
            self._pdf[slots] = proposal_pdf
            self._analytic[slots] = analytic_pdf
            self._atom[slots] = atom
            self._head = (self._head + n) % self.capacity
            self._size = min(self._size + n, self.capacity)

    def _take(self, slots: np.ndarray) -> Batch:
        return Batch(
            self._x[slots].copy(),
            self._cond[slots].copy(),
            self._f[slots].copy(),
            self._pdf[slots].copy(),
            self._analytic[slots].copy(),
            self._atom[slots].copy(),
        )

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch drawn with replacement"""
        with self._lock:
            if self._size == 0:
                raise DomainError("cannot draw a minibatch from an empty replay buffer")
            slots = (self._head - self._size + rng.integers(0, self._size, size=n)) % self.capacity
            return self._take(slots)

    def contents(self) -> Batch:
        """All stored records, oldest first"""
        with self._lock:
            slots = (self._head - self._size + np.arange(self._size)) % self.capacity
            return self._take(slots)


@dataclass
class ProposalDraw:
    x: np.ndarray
    pdf: np.ndarray
    analytic_pdf: Optional[np.ndarray] = None
    atom: Optional[np.ndarray] = None


class Proposal(Protocol):
    """Source of samples together with the density they were drawn from"""

    needs_snapshot: bool

    def draw(self, cond: np.ndarray, rng: np.random.Generator) -> ProposalDraw:
        ...

    def update(self, snapshot) -> None:
        ...


class Target(Protocol):
    """Unnormalized integrand; `contexts` holds one raw conditioning row per context"""

    contexts: np.ndarray

    def evaluate(self, x: np.ndarray, cond: np.ndarray, atom: Optional[np.ndarray] = None) -> np.ndarray:
        ...


class Learner(Protocol):
    total_steps: int
    rejected_steps: int
    progress: float

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator) -> StepMetrics:
        ...

    def snapshot(self):
        ...


class UniformProposal:
    needs_snapshot = False

    def __init__(self, dim: int):
        self.dim = dim

    def draw(self, cond: np.ndarray, rng: np.random.Generator) -> ProposalDraw:
        n = cond.shape[0]
        return ProposalDraw(rng.random((n, self.dim)), np.ones(n))

    def update(self, snapshot) -> None:
        pass


class FlowProposal:
    """Samples from the last published flow snapshot"""

    needs_snapshot = True

    def __init__(self, flow: NormalizingFlow):
        self.flow = flow

    def draw(self, cond: np.ndarray, rng: np.random.Generator) -> ProposalDraw:
        n = cond.shape[0]
        u = rng.random((n, self.flow.dim))
        x, pdf = self.flow.sample(u, cond if self.flow.conditioning else None)
        return ProposalDraw(x, pdf)

    def update(self, snapshot: NormalizingFlow) -> None:
        self.flow = snapshot


class Trainer:
    """Single writer of the flow parameters"""

    def __init__(self, flow: NormalizingFlow, cfg: TrainConfig, owner: Optional[Parametric] = None):
        self.flow = flow
        self.cfg = cfg
        self.owner = owner if owner is not None else flow
        self.adam = AdamState.for_owner(self.owner, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        self.total_steps = 0
        self.rejected_steps = 0
        self.progress = 0.0

    def loss_and_gradients(self, batch: Batch) -> Tuple[float, GradientSet]:
        """Mean of -w log q over the batch and its parameter gradient"""
        cond = batch.cond if self.flow.conditioning else None
        _, log_q, cache = self.flow.forward(batch.x, cond)
        w = loss_weight(batch.f_est, batch.proposal_pdf, np.exp(log_q), self.cfg.loss)
        n = len(batch)
        loss = float(np.mean(-w * log_q))
        grads, _ = self.flow.backward(cache, -w / n)
        return loss, grads

    def _reject(self, reason: str, loss: float = float("nan"), norm: float = float("nan")) -> StepMetrics:
        self.rejected_steps += 1
        logger.warning(f"Rejected training step {self.total_steps}: {reason}")
        return StepMetrics(loss=loss, grad_norm=norm, raw_grad_norm=norm, clipped=False, rejected=True)

    def apply(self, loss: float, grads: GradientSet) -> StepMetrics:
        """Clip and take an Adam step unless the loss or gradient is non-finite"""
        self.total_steps += 1
        if not np.isfinite(loss):
            return self._reject("non-finite loss", loss)
        raw_norm = grads.global_norm()
        clipped = False
        if self.cfg.grad_clip_norm is not None:
            clipped = raw_norm > self.cfg.grad_clip_norm
            grads = clip_global_norm(grads, self.cfg.grad_clip_norm)
        norm = grads.global_norm()
        try:
            adam_step(self.owner, self.adam, grads)
        except NonFiniteGradientError as e:
            return self._reject(e.message, loss, norm)
        logger.debug(f"step {self.total_steps}: loss={loss:.6g} grad_norm={norm:.6g}")
        return StepMetrics(loss=loss, grad_norm=norm, raw_grad_norm=raw_norm, clipped=clipped)

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator) -> StepMetrics:
        batch = buffer.sample(self.cfg.batch_size, rng)
        try:
            loss, grads = self.loss_and_gradients(batch)
        except (DegenerateDensityError, FloatingPointError) as e:
            self.total_steps += 1
            return self._reject(str(e))
        return self.apply(loss, grads)

    def snapshot(self) -> NormalizingFlow:
        return self.flow.copy()


def combine_iterations(estimates: Sequence[Tuple[float, float]]) -> float:
    """Inverse-variance weighted mean of (value, variance) pairs"""
    if not estimates:
        raise DomainError("no iterations to combine")
    values = np.array([v for v, _ in estimates], dtype=np.float64)
    variances = np.array([s for _, s in estimates], dtype=np.float64)
    weights = np.where(variances > 0.0, 1.0 / np.where(variances > 0.0, variances, 1.0), ZERO_VARIANCE_WEIGHT)
    weights = np.minimum(weights, ZERO_VARIANCE_WEIGHT)
    return float(np.sum(weights * values) / np.sum(weights))


@dataclass
class _IterationStats:
    n_contexts: int
    values: List[np.ndarray] = field(default_factory=list)
    contexts: List[np.ndarray] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def record(self, iteration: int, wallclock_ms: float) -> IterationRecord:
        values = np.concatenate(self.values)
        contexts = np.concatenate(self.contexts)
        means, variances = [], []
        for c in range(self.n_contexts):
            v = values[contexts == c]
            means.append(float(np.mean(v)))
            variances.append(float(np.var(v, ddof=1)) if v.size > 1 else float("nan"))
        finite = [l for l in self.losses if np.isfinite(l)]
        return IterationRecord(
            iteration=iteration,
            samples=int(values.size),
            loss=float(np.mean(finite)) if finite else float("nan"),
            estimate=float(np.mean(means)),
            variance=float(np.mean(variances)),
            weight_p9999=float(np.percentile(values, 99.99)),
            wallclock_ms=wallclock_ms,
            context_estimates=means,
            context_variances=variances,
        )


def online_loop(
    flow: NormalizingFlow,
    target: Target,
    schedule: ScheduleSpec,
    cfg: TrainConfig,
    proposal: Optional[Proposal] = None,
    learner: Optional[Learner] = None,
    streams: Optional[RngStreams] = None,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
    progress: bool = True,
) -> ExperimentReport:
    """Sample, evaluate, store and train in power-of-two iterations

    Every context in `target.contexts` receives 2^i samples in iteration i.
    A failing target evaluation ends the run with a partial report.
    """
    streams = streams or RngStreams(0)
    learner = learner or Trainer(flow, cfg)
    if proposal is None:
        proposal = FlowProposal(flow.copy()) if schedule.proposal == ProposalKind.FLOW else UniformProposal(flow.dim)
    contexts = np.asarray(target.contexts, dtype=np.float64)
    n_contexts = contexts.shape[0]
    buffer = ReplayBuffer(cfg.buffer_capacity, flow.dim, contexts.shape[1])
    counts = schedule.iteration_counts()
    total = sum(counts) * n_contexts
    record_wallclock = get_settings().record_wallclock
    report = ExperimentReport()
    drawn = 0

    for i, count in enumerate(tqdm(counts, desc="iterations", disable=not progress)):
        started = time.perf_counter()
        stats = _IterationStats(n_contexts)
        context_index = np.repeat(np.arange(n_contexts), count)
        for start in range(0, context_index.size, cfg.batch_size):
            chunk = context_index[start:start + cfg.batch_size]
            cond = contexts[chunk]
            learner.progress = drawn / total
            draw = proposal.draw(cond, streams.sampler)
            try:
                f = np.asarray(target.evaluate(draw.x, cond, draw.atom), dtype=np.float64)
                if f.shape != draw.pdf.shape or np.any(~np.isfinite(f)) or np.any(f < 0.0):
                    raise TargetEvaluationError("target returned non-finite, negative or misshapen values")
            except Exception as e:
                message = e.message if isinstance(e, FlowMCError) else str(e)
                logger.error(f"Target evaluation failed in iteration {i}: {message}")
                report.aborted = True
                report.error = message
                break
            stats.values.append(f / draw.pdf)
            stats.contexts.append(chunk)
            buffer.push_batch(draw.x, cond, f, draw.pdf, draw.analytic_pdf, draw.atom)
            drawn += chunk.size
            if schedule.train:
                for _ in range(cfg.steps_per_batch):
                    stats.losses.append(learner.train_step(buffer, streams.trainer).loss)
                if proposal.needs_snapshot:
                    proposal.update(learner.snapshot())
        if report.aborted:
            break
        wallclock_ms = (time.perf_counter() - started) * 1000.0 if record_wallclock else 0.0
        record = stats.record(i, wallclock_ms)
        report.iterations.append(record)
        logger.info(
            f"iteration {i}: samples={record.samples} estimate={record.estimate:.6g} "
            f"variance={record.variance:.6g} loss={record.loss:.6g}"
        )
        if on_iteration is not None:
            on_iteration(record)

    report.total_steps = learner.total_steps
    report.rejected_steps = learner.rejected_steps
    if report.iterations:
        report.combined_estimate = combine_report(report, counts)
    return report


def combine_report(report: ExperimentReport, counts: Sequence[int]) -> float:
    """Combine iterations by the variance of their estimates; single-sample iterations are skipped"""
    pairs = [(r.estimate, r.variance / counts[r.iteration]) for r in report.iterations if np.isfinite(r.variance)]
    if not pairs:
        return float(report.iterations[0].estimate) if len(report.iterations) == 1 else float("nan")
    return combine_iterations(pairs)

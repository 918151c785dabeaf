import numpy as np
import pytest

from flowmc.bench import StepTarget
from flowmc.errors import DegenerateDensityError, DomainError
from flowmc.flow import build_flow
from flowmc.models import LossKind
from flowmc.nnet import GradientSet
from flowmc.rng import RngStreams, philox_generator
from flowmc.schemas import ScheduleSpec, TrainConfig, TrainRecord
from flowmc.training import (
    ReplayBuffer,
    Trainer,
    UniformProposal,
    combine_iterations,
    loss_weight,
    online_loop,
)
from tests.conftest import numeric_gradient, relative_error


class ConstantTarget:
    contexts = np.zeros((1, 0))

    def evaluate(self, x, cond, atom=None):
        return np.ones(x.shape[0])


class FailingTarget:
    contexts = np.zeros((1, 0))

    def __init__(self, fail_after):
        self.calls = 0
        self.fail_after = fail_after

    def evaluate(self, x, cond, atom=None):
        self.calls += 1
        if self.calls > self.fail_after:
            raise RuntimeError("renderer crashed")
        return np.ones(x.shape[0])


def _fill(buffer, x, f, pdf=None):
    n = x.shape[0]
    buffer.push_batch(x, np.zeros((n, 0)), f, np.ones(n) if pdf is None else pdf)


class TestLossWeight:
    def test_zero_integrand(self):
        assert loss_weight(0.0, 1.0, 1.0) == 0.0

    def test_kl(self):
        assert loss_weight(2.0, 1.0, 1.0, LossKind.KL) == 2.0

    def test_chi2(self):
        assert loss_weight(2.0, 1.0, 1.0, LossKind.CHI2) == 4.0

    def test_degenerate(self):
        with pytest.raises(DegenerateDensityError):
            loss_weight(1.0, 1.0, 0.0)

    def test_chi2_gradient_direction(self):
        # density q(x) = 1 + a (x - 1/2) on [0, 1], integrand f = 1 + x
        x = (np.arange(2000) + 0.5) / 2000
        f = 1.0 + x

        def variance_loss(a):
            return float(np.mean(f * f / (1.0 + a * (x - 0.5))))

        a = 0.3
        q = 1.0 + a * (x - 0.5)
        w = loss_weight(f, np.ones_like(x), q, LossKind.CHI2)
        analytic = float(np.mean(-w * (x - 0.5) / q))
        h = 1e-6
        numeric = (variance_loss(a + h) - variance_loss(a - h)) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-6)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buffer = ReplayBuffer(3, dim=1)
        for i in range(5):
            buffer.push(TrainRecord(x=[i / 10], f_est=float(i), proposal_pdf=1.0))
        assert len(buffer) == 3
        np.testing.assert_array_equal(buffer.contents().f_est, [2.0, 3.0, 4.0])

    def test_oversized_batch_keeps_newest(self):
        buffer = ReplayBuffer(4, dim=1)
        _fill(buffer, np.linspace(0, 0.9, 10)[:, None], np.arange(10.0))
        np.testing.assert_array_equal(buffer.contents().f_est, [6.0, 7.0, 8.0, 9.0])

    def test_sample_from_empty(self, rng):
        with pytest.raises(DomainError):
            ReplayBuffer(4, dim=1).sample(2, rng)

    def test_rejects_invalid_records(self):
        buffer = ReplayBuffer(4, dim=1)
        with pytest.raises(DomainError):
            _fill(buffer, np.array([[0.5]]), np.array([-1.0]))
        with pytest.raises(DomainError):
            _fill(buffer, np.array([[0.5]]), np.array([1.0]), pdf=np.array([0.0]))

    def test_record_validation(self):
        with pytest.raises(ValueError):
            TrainRecord(x=[0.5], f_est=float("nan"), proposal_pdf=1.0)


class TestSchedule:
    def test_power_of_two_counts(self):
        counts = ScheduleSpec(budget=1023).iteration_counts()
        assert counts == [2 ** i for i in range(10)]
        assert sum(counts) == 1023

    def test_single_sample(self):
        assert ScheduleSpec(budget=1).iteration_counts() == [1]

    def test_partial_iteration_dropped(self):
        assert ScheduleSpec(budget=1500).iteration_counts()[-1] == 512


class TestCombineIterations:
    def test_equal_variances(self):
        assert combine_iterations([(1.0, 2.0), (3.0, 2.0)]) == pytest.approx(2.0)

    def test_inverse_variance_weights(self):
        assert combine_iterations([(1.0, 1.0), (5.0, 3.0)]) == pytest.approx(0.75 * 1.0 + 0.25 * 5.0)

    def test_single(self):
        assert combine_iterations([(4.2, 0.5)]) == 4.2

    def test_zero_variance_dominates(self):
        assert combine_iterations([(1.0, 0.0), (5.0, 1.0)]) == pytest.approx(1.0, abs=1e-9)

    def test_empty(self):
        with pytest.raises(DomainError):
            combine_iterations([])


class TestTrainer:
    def test_minibatch_gradient(self, small_flow_factory, rng):
        flow = small_flow_factory(bins=3)
        trainer = Trainer(flow, TrainConfig(batch_size=16))
        buffer = ReplayBuffer(64, dim=2)
        x = rng.uniform(0.05, 0.95, size=(16, 2))
        _fill(buffer, x, rng.random(16) + 0.1, rng.uniform(0.5, 2.0, size=16))
        batch = buffer.sample(16, rng)
        _, grads = trainer.loss_and_gradients(batch)

        w = batch.f_est / batch.proposal_pdf

        def loss():
            return float(np.mean(-w * flow.log_pdf(batch.x)))

        assert relative_error(grads.tensors, numeric_gradient(loss, flow.parameters())) < 1e-4

    def test_non_finite_loss_rejected(self, small_flow_factory):
        flow = small_flow_factory()
        before = [p.copy() for p in flow.parameters()]
        trainer = Trainer(flow, TrainConfig())
        metrics = trainer.apply(float("nan"), GradientSet.zeros_like(flow))
        assert metrics.rejected
        assert trainer.rejected_steps == trainer.total_steps == 1
        for p, q in zip(flow.parameters(), before):
            np.testing.assert_array_equal(p, q)

    def test_chi2_clip(self, small_flow_factory, rng):
        flow = small_flow_factory()
        cfg = TrainConfig(loss=LossKind.CHI2, batch_size=64)
        assert cfg.grad_clip_norm == 50.0
        buffer = ReplayBuffer(64, dim=2)
        _fill(buffer, rng.random((64, 2)), np.full(64, 1e4))
        metrics = Trainer(flow, cfg).train_step(buffer, rng)
        assert metrics.raw_grad_norm > 50.0
        assert metrics.clipped
        assert metrics.grad_norm <= 50.0 + 1e-9

    def test_perfect_fit_gradient_shrinks_with_batch(self, small_flow_factory):
        flow = small_flow_factory(scale=0.2)
        norms = []
        for n in (256, 4096):
            rng = philox_generator(99, 0)
            x, pdf = flow.sample(rng.random((n, 2)))
            trainer = Trainer(flow, TrainConfig(batch_size=n))
            buffer = ReplayBuffer(n, dim=2)
            _fill(buffer, x, pdf, pdf)
            _, grads = trainer.loss_and_gradients(buffer.contents())
            norms.append(grads.global_norm())
        assert norms[1] < norms[0] / 2.0

    def test_direct_logit_step_optimum(self):
        flow = build_flow(dim=1, n_layers=1, kind="piecewise_linear", bins=2)
        trainer = Trainer(flow, TrainConfig(batch_size=1024, learning_rate=1e-2))
        target = StepTarget(dim=1)
        buffer = ReplayBuffer(1024, dim=1)
        rng = philox_generator(3, 0)
        for _ in range(2000):
            x = rng.random((1024, 1))
            _fill(buffer, x, target.evaluate(x))
            trainer.train_step(buffer, rng)
        q = flow.pdf(np.array([[0.25], [0.75]])) / 2.0
        np.testing.assert_allclose(q, [0.25, 0.75], atol=0.02)


class TestOnlineLoop:
    def test_untrained_uniform_estimate(self):
        flow = build_flow(dim=2, n_layers=2, outer_width=8, nesting=1)
        report = online_loop(
            flow, ConstantTarget(), ScheduleSpec(budget=63, train=False), TrainConfig(batch_size=16),
            streams=RngStreams(0), progress=False,
        )
        assert [r.samples for r in report.iterations] == [1, 2, 4, 8, 16, 32]
        assert report.total_steps == 0
        assert all(r.estimate == pytest.approx(1.0) for r in report.iterations)
        assert np.isnan(report.iterations[0].variance)
        assert report.iterations[-1].variance == pytest.approx(0.0, abs=1e-20)
        assert report.combined_estimate == pytest.approx(1.0)

    def test_training_steps_counted(self):
        flow = build_flow(dim=2, n_layers=2, outer_width=8, nesting=1)
        report = online_loop(
            flow, StepTarget(dim=2), ScheduleSpec(budget=127), TrainConfig(batch_size=32, steps_per_batch=2),
            proposal=UniformProposal(2), streams=RngStreams(1), progress=False,
        )
        # chunks per iteration: 1, 1, 1, 1, 1, 1, 2
        assert report.total_steps == 2 * 8
        assert report.rejected_steps == 0
        assert report.rejected_fraction == 0.0

    def test_target_failure_gives_partial_report(self):
        flow = build_flow(dim=2, n_layers=2, outer_width=8, nesting=1)
        report = online_loop(
            flow, FailingTarget(fail_after=3), ScheduleSpec(budget=63), TrainConfig(batch_size=64),
            streams=RngStreams(0), progress=False,
        )
        assert report.aborted
        assert "renderer crashed" in report.error
        assert len(report.iterations) == 3

    def test_deterministic(self):
        reports = []
        for _ in range(2):
            flow = build_flow(dim=2, n_layers=2, outer_width=8, nesting=1, seed=4)
            reports.append(online_loop(
                flow, StepTarget(dim=2), ScheduleSpec(budget=255), TrainConfig(batch_size=32),
                streams=RngStreams(4), progress=False,
            ))
        assert repr(reports[0].model_dump()) == repr(reports[1].model_dump())

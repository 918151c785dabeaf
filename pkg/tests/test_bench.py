import numpy as np
import pytest
from scipy.integrate import quad

from flowmc.bench import (
    DIAGNOSE_DENSITIES,
    ImageTarget,
    StepTarget,
    appendix_b_curve,
    appendix_b_gradients,
    bilinear,
    collect_metrics,
    cross_entropy,
    density_grid,
    estimator_variance,
    image_target_eval,
    mape,
    procedural_target,
    pss_synthetic_target,
    reference_density,
)
from flowmc.errors import DomainError, InvalidConfigError, ShapeError
from flowmc.flow import build_flow
from flowmc.schemas import DiagnoseSpec, ScheduleSpec, TrainConfig
from flowmc.training import FlowProposal, UniformProposal, online_loop


class TestImageTarget:
    def test_bilinear_between_texels(self):
        grid = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert bilinear(grid, np.array([[0.5, 0.5]])) == pytest.approx([0.5])

    def test_texel_centres_are_exact(self):
        grid = np.arange(12, dtype=np.float64).reshape(3, 4)
        rows, cols = np.meshgrid(np.arange(3), np.arange(4), indexing="ij")
        x = np.stack([(cols.ravel() + 0.5) / 4, (rows.ravel() + 0.5) / 3], axis=1)
        np.testing.assert_allclose(bilinear(grid, x), grid.ravel(), atol=1e-12)

    def test_image_target_eval(self):
        target = ImageTarget(np.array([[1.0, 3.0], [5.0, 7.0]]))
        assert image_target_eval(target, np.array([[0.5, 0.5]])) == pytest.approx([4.0])
        assert image_target_eval(target, np.array([[0.25, 0.75]])) == pytest.approx([5.0])

    def test_edges_clamp(self):
        grid = np.array([[2.0, 4.0], [6.0, 8.0]])
        corners = np.array([[0.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(bilinear(grid, corners), [2.0, 8.0])

    def test_rejects_points_outside(self):
        target = procedural_target("constant", 4)
        with pytest.raises(DomainError):
            target.evaluate(np.array([[0.5, 1.2]]))

    @pytest.mark.parametrize("grid", [np.zeros((2, 2)), -np.ones((2, 2)), np.ones(4)])
    def test_rejects_bad_grids(self, grid):
        with pytest.raises(InvalidConfigError):
            ImageTarget(grid)

    def test_unknown_procedural(self):
        with pytest.raises(InvalidConfigError):
            procedural_target("checkerboard")

    def test_reference_density_has_unit_mean(self):
        ref = reference_density(procedural_target("rings", 32), 16)
        assert ref.shape == (16, 16)
        assert np.mean(ref) == pytest.approx(1.0)


class TestMetrics:
    def test_mape(self):
        assert mape(np.array([2.0]), np.array([1.0])) == pytest.approx(1.0 / 1.01)
        assert mape(np.zeros(3), np.zeros(3)) == 0.0
        assert mape(np.array([1.1, 1.0]), np.array([1.0, 1.0])) == pytest.approx(0.05 / 1.01)

    def test_mape_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mape(np.ones(3), np.ones(4))

    def test_cross_entropy_of_uniform_is_zero(self):
        assert cross_entropy(np.ones((8, 8)), np.ones((8, 8))) == pytest.approx(0.0, abs=1e-15)

    def test_cross_entropy_is_minimal_at_reference(self):
        ref = reference_density(procedural_target("step", 8), 8)
        assert cross_entropy(ref, ref) < cross_entropy(np.ones((8, 8)), ref)

    def test_untrained_density_grid_is_uniform(self):
        flow = build_flow(dim=2, n_layers=2, bins=4, outer_width=8, nesting=1, one_blob_bins=4)
        grid = density_grid(flow, 16)
        assert grid.shape == (16, 16)
        np.testing.assert_allclose(grid, 1.0, rtol=1e-9)

    def test_density_grid_needs_2d(self):
        flow = build_flow(dim=3, n_layers=3, bins=4, outer_width=8, nesting=1, one_blob_bins=4)
        with pytest.raises(ShapeError):
            density_grid(flow, 8)

    def test_untrained_flow_on_constant_target(self, rng):
        flow = build_flow(dim=2, n_layers=2, bins=4, outer_width=8, nesting=1, one_blob_bins=4)
        mean, variance = estimator_variance(FlowProposal(flow), procedural_target("constant", 8), 4096, rng)
        assert mean == pytest.approx(1.0)
        assert variance == pytest.approx(0.0, abs=1e-18)

    def test_uniform_proposal_on_step_target(self, rng):
        mean, variance = estimator_variance(UniformProposal(2), StepTarget(), 100_000, rng)
        assert mean == pytest.approx(1.0, abs=0.01)
        assert variance == pytest.approx(0.25, abs=0.01)

    def test_estimator_variance_needs_two_samples(self, rng):
        with pytest.raises(DomainError):
            estimator_variance(UniformProposal(2), StepTarget(), 1, rng)

    def test_collect_metrics_rows(self, rng):
        ref = reference_density(procedural_target("step", 8), 8)
        metrics = collect_metrics(UniformProposal(2), StepTarget(), 1000, rng, np.ones((8, 8)), ref)
        keys = [row["key"] for row in metrics.as_rows()]
        assert keys == [
            "estimator_mean",
            "estimator_variance",
            "weight_p50",
            "weight_p99",
            "weight_p9999",
            "mape",
            "cross_entropy",
            "clamped_inputs",
        ]
        assert metrics.weight_quantiles["p9999"] == pytest.approx(1.5)


class TestAdaptiveBinDiagnostic:
    def test_uniform_mass_norm_is_zero(self):
        for row in appendix_b_curve(DiagnoseSpec(target="uniform")):
            assert row.mass_norm_grad == pytest.approx(0.0, abs=1e-10)

    def test_density_norm_keeps_one_sign(self):
        rows = appendix_b_curve(DiagnoseSpec(target="uniform", q1=1.0, q2=3.0))
        assert len(rows) == 99
        assert {row.density_norm_grad_sign for row in rows} == {-1}

    def test_exact_gradient_vanishes_for_uniform_at_balanced_bins(self):
        rows = appendix_b_curve(DiagnoseSpec(target="uniform", q1=2.0, q2=2.0))
        assert all(row.exact_grad == pytest.approx(0.0, abs=1e-12) for row in rows)

    def test_step_mass_norm_at_discontinuity(self):
        p, breaks = DIAGNOSE_DENSITIES["step"]
        row = appendix_b_gradients(0.5, 1.0, 3.0, p, breaks)
        assert row.mass_norm_grad == pytest.approx(2.0)

    @pytest.mark.parametrize("theta", [0.2, 0.45, 0.8])
    def test_exact_gradient_matches_cross_entropy_derivative(self, theta):
        p, breaks = DIAGNOSE_DENSITIES["ramp"]
        q1, q2 = 1.0, 3.0

        def loss(t):
            s = q1 * t + q2 * (1.0 - t)
            left, _ = quad(p, 0.0, t)
            right, _ = quad(p, t, 1.0)
            return -(left * np.log(q1 / s) + right * np.log(q2 / s))

        h = 1e-5
        numeric = (loss(theta + h) - loss(theta - h)) / (2.0 * h)
        row = appendix_b_gradients(theta, q1, q2, p, breaks)
        assert row.exact_grad == pytest.approx(numeric, rel=1e-6)

    @pytest.mark.parametrize("theta,q1", [(0.0, 1.0), (1.0, 1.0), (0.5, 0.0)])
    def test_rejects_bad_arguments(self, theta, q1):
        p, breaks = DIAGNOSE_DENSITIES["uniform"]
        with pytest.raises(DomainError):
            appendix_b_gradients(theta, q1, 1.0, p, breaks)


class TestSyntheticTarget:
    def test_reversal_invariant(self, rng):
        target = pss_synthetic_target(6)
        x = rng.random((100, 6))
        np.testing.assert_allclose(target.evaluate(x[:, ::-1]), target.evaluate(x), rtol=1e-12)
        assert target.permutation == [5, 4, 3, 2, 1, 0]

    def test_normalization_matches_monte_carlo(self, rng):
        target = pss_synthetic_target(4)
        n = 400_000
        values = target.evaluate(rng.random((n, 4)))
        stderr = np.std(values) / np.sqrt(n)
        assert abs(np.mean(values) - target.normalization) < 4.0 * stderr

    @pytest.mark.parametrize("dim", [2, 5, 10])
    def test_rejects_unsupported_dims(self, dim):
        with pytest.raises(InvalidConfigError):
            pss_synthetic_target(dim)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["step_wedge", "rings"])
def test_training_improves_density_fit(name, rng):
    target = procedural_target(name, 64)
    reference = reference_density(target, 64)
    flow = build_flow(dim=2, n_layers=2, bins=32, one_blob_bins=32, outer_width=64, nesting=2, seed=1)
    before = cross_entropy(density_grid(flow, 64), reference)
    online_loop(
        flow,
        target,
        ScheduleSpec(budget=131071),
        TrainConfig(batch_size=4096, steps_per_batch=8),
        proposal=UniformProposal(2),
        progress=False,
    )
    after_grid = density_grid(flow, 64)
    assert cross_entropy(after_grid, reference) < before
    assert mape(after_grid, reference) < mape(np.ones_like(reference), reference)

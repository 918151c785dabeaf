import numpy as np
import pytest

from flowmc.coupling import CouplingLayer, coupling_forward, coupling_inverse, network_input_width
from flowmc.errors import ShapeError
from flowmc.flow import build_flow
from flowmc.models import TransformKind
from flowmc.nnet import xavier_init
from flowmc.transforms import make_transform
from tests.conftest import numeric_gradient, relative_error

LOGIT_KINDS = (TransformKind.AFFINE, TransformKind.ADDITIVE)


def _scale(kind):
    return 0.1 if kind in LOGIT_KINDS else 0.3


class TestCouplingLayer:
    @pytest.mark.parametrize("kind", [TransformKind.PIECEWISE_LINEAR, TransformKind.PIECEWISE_QUADRATIC])
    def test_identity_start(self, kind, rng):
        layer = build_flow(dim=3, n_layers=3, kind=kind, bins=8).layers[0]
        x = rng.random((50, 3))
        y, log_det = coupling_forward(layer, x)
        np.testing.assert_allclose(y, x, atol=1e-12)
        np.testing.assert_allclose(log_det, 0.0, atol=1e-12)
        back, inverse_log_det = coupling_inverse(layer, y)
        np.testing.assert_allclose(back, x, atol=1e-12)

    def test_pass_through_partition_untouched(self, small_flow_factory, rng):
        layer = small_flow_factory(dim=4, n_layers=4).layers[0]
        x = rng.random((20, 4))
        y, _ = coupling_forward(layer, x)
        np.testing.assert_array_equal(y[:, layer.mask_a], x[:, layer.mask_a])
        assert not np.allclose(y[:, layer.mask_b], x[:, layer.mask_b])

    @pytest.mark.parametrize("kind", list(TransformKind))
    def test_log_det_matches_jacobian(self, kind, small_flow_factory, rng):
        layer = small_flow_factory(kind=kind, scale=_scale(kind)).layers[0]
        x = rng.uniform(0.05, 0.95, size=(8, 2))
        _, log_det = coupling_forward(layer, x)
        h = 1e-6
        up, down = x.copy(), x.copy()
        up[:, 1] += h
        down[:, 1] -= h
        jac = (coupling_forward(layer, up)[0][:, 1] - coupling_forward(layer, down)[0][:, 1]) / (2 * h)
        np.testing.assert_allclose(np.exp(log_det), jac, rtol=1e-4)

    @pytest.mark.parametrize("kind", list(TransformKind))
    @pytest.mark.parametrize("bins", [2, 32])
    def test_round_trip(self, kind, bins, small_flow_factory, rng):
        layer = small_flow_factory(kind=kind, bins=bins, scale=_scale(kind)).layers[1]
        y = rng.random((10000, 2))
        x, inverse_log_det = coupling_inverse(layer, y)
        again, log_det = coupling_forward(layer, x)
        np.testing.assert_allclose(again, y, atol=1e-9)
        np.testing.assert_allclose(inverse_log_det, -log_det, atol=1e-8)

    def test_input_gradient(self, small_flow_factory, rng):
        layer = small_flow_factory().layers[0]
        x = rng.uniform(0.05, 0.95, size=(6, 2))
        cond = np.zeros((6, 0))
        g_y = rng.normal(size=(6, 2))
        g_ld = rng.normal(size=6)

        def loss():
            y, log_det, _ = layer.forward(x, cond)
            return float(np.sum(g_y * y) + np.sum(g_ld * log_det))

        _, _, cache = layer.forward(x, cond)
        grads, g_x = layer.backward(cache, g_y, g_ld)
        numeric = numeric_gradient(loss, [x] + layer.parameters())
        assert relative_error([g_x] + grads.tensors, numeric) < 1e-4

    def test_network_width_checked(self):
        transform = make_transform(TransformKind.PIECEWISE_LINEAR, 4)
        net = xavier_init([network_input_width(1, 0, 8), 4, 3], seed=0)
        with pytest.raises(ShapeError):
            CouplingLayer(2, [1], transform, net, encoding_bins=8)

    def test_partition_checked(self):
        transform = make_transform(TransformKind.PIECEWISE_LINEAR, 4)
        net = xavier_init([8, 4, 4], seed=0)
        with pytest.raises(ShapeError):
            CouplingLayer(2, [2], transform, net, encoding_bins=8)

    def test_input_width(self):
        assert network_input_width(2, 1, 32) == 96
        assert network_input_width(2, 1, None) == 3
        assert network_input_width(0, 0, 32) == 1

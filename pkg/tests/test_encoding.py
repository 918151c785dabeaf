import numpy as np
import pytest

from flowmc.encoding import (
    OneBlobConfig,
    encode_columns,
    encode_columns_backward,
    encode_features,
    kernel_mass,
    one_blob_scalar,
)
from flowmc.errors import DomainError
from tests.conftest import numeric_gradient, relative_error


class TestOneBlobScalar:
    def test_centre_value(self):
        code = one_blob_scalar(0.5, OneBlobConfig(k=4))
        np.testing.assert_allclose(code, [0.135905, 0.341345, 0.341345, 0.135905], atol=1e-5)

    @pytest.mark.parametrize("s", [0.0, 0.13, 0.5, 0.77, 1.0])
    def test_mirror_symmetry(self, s):
        cfg = OneBlobConfig(k=32)
        np.testing.assert_allclose(one_blob_scalar(s, cfg), one_blob_scalar(1.0 - s, cfg)[::-1], atol=1e-12)

    def test_argmax(self):
        code = one_blob_scalar(0.5, OneBlobConfig(k=4))
        assert code[1] == pytest.approx(code[2], abs=1e-15)
        assert np.argmax(one_blob_scalar(0.9, OneBlobConfig(k=4))) == 3

    @pytest.mark.parametrize("s", [0.0, 0.02, 0.4, 1.0])
    def test_sum_is_kernel_mass(self, s):
        cfg = OneBlobConfig(k=32)
        code = one_blob_scalar(s, cfg)
        assert code.sum() == pytest.approx(kernel_mass(s, cfg), abs=1e-12)
        assert kernel_mass(s, cfg) >= 0.5
        assert np.all((code >= 0.0) & (code < 1.0))

    def test_localization(self):
        candidates = np.linspace(0.0, 1.0, 1001)
        codes = encode_columns(candidates[:, None], 32)
        for s in [0.123, 0.5, 0.871]:
            code = one_blob_scalar(s, OneBlobConfig(k=32))
            best = candidates[int(np.argmin(np.sum((codes - code) ** 2, axis=1)))]
            assert abs(best - s) <= 1e-3

    def test_continuity(self):
        cfg = OneBlobConfig(k=32)
        delta = np.abs(one_blob_scalar(0.4, cfg) - one_blob_scalar(0.4 + 1e-9, cfg))
        assert delta.max() < 1e-7

    @pytest.mark.parametrize("s", [-0.01, 1.5, np.nan])
    def test_domain(self, s):
        with pytest.raises(DomainError):
            one_blob_scalar(s, OneBlobConfig(k=8))

    def test_sigma(self):
        assert OneBlobConfig(k=32).sigma == 1.0 / 32


class TestEncodeFeatures:
    def test_empty(self):
        assert encode_features([], OneBlobConfig()).shape == (0,)

    def test_equal_halves(self):
        code = encode_features([0.5, 0.5], OneBlobConfig(k=4))
        np.testing.assert_array_equal(code[:4], code[4:])
        np.testing.assert_allclose(code, code[::-1], atol=1e-15)

    def test_mirrored_blocks(self):
        code = encode_features([0.1, 0.9], OneBlobConfig(k=32))
        np.testing.assert_allclose(code[:32], code[32:][::-1], atol=1e-12)

    def test_offending_index_reported(self):
        with pytest.raises(DomainError, match="index 1"):
            encode_features([0.2, 1.2], OneBlobConfig(k=4))


class TestEncodeColumns:
    def test_raw_passthrough(self, rng):
        values = rng.random((3, 2))
        np.testing.assert_array_equal(encode_columns(values, None), values)

    def test_backward_matches_finite_differences(self, rng):
        values = rng.uniform(0.1, 0.9, size=(3, 2))
        g = rng.normal(size=(3, 16))

        def loss():
            return float(np.sum(encode_columns(values, 8) * g))

        analytic = encode_columns_backward(values, g, 8)
        assert relative_error([analytic], numeric_gradient(loss, [values])) < 1e-6

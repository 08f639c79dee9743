import numpy as np
import pytest

from edcnn.edge import (
    BASE_PATTERNS,
    VERTICAL,
    SobelBank,
    build_kernels,
    ee_backward,
    ee_forward,
)
from edcnn.errors import ConfigError, ShapeMismatchError
from edcnn.tensor import finite_diff_check


class TestBasePatterns:
    """Tests for the fixed Sobel patterns."""

    def test_zero_sum(self):
        """Test that every base pattern sums to exactly zero."""
        assert (BASE_PATTERNS.sum(axis=(1, 2)) == 0).all()

    def test_horizontal_is_transpose(self):
        """Test that the horizontal pattern is the transposed vertical one."""
        np.testing.assert_array_equal(BASE_PATTERNS[1], BASE_PATTERNS[0].T)


class TestSobelBank:
    """Tests for SobelBank and kernel construction."""

    def test_initial_factors(self):
        """Test that a fresh bank has every factor at 1."""
        bank = SobelBank.initial(32)
        assert bank.n_filters == 32
        assert (bank.factors == 1.0).all()

    def test_multiple_of_four(self):
        """Test that filter counts must be multiples of 4."""
        with pytest.raises(ConfigError):
            SobelBank.initial(6)

    def test_zero_factors(self):
        """Test that zero factors give all-zero kernels."""
        assert not build_kernels(SobelBank(np.zeros(8, np.float32))).any()

    def test_unit_factors_classical(self):
        """Test that unit factors reproduce the classical patterns in group order."""
        kernels = build_kernels(SobelBank.initial(8))
        assert kernels.shape == (8, 1, 3, 3)
        for i in range(8):
            np.testing.assert_array_equal(kernels[i, 0], BASE_PATTERNS[i % 4])

    def test_scaling(self):
        """Test that a factor of 2 doubles only its own filter."""
        kernels = build_kernels(SobelBank(np.array([2, 1, 1, 1], np.float32)))
        np.testing.assert_array_equal(kernels[0, 0], 2 * np.array(VERTICAL))
        for i in range(1, 4):
            np.testing.assert_array_equal(kernels[i, 0], BASE_PATTERNS[i])


class TestEdgeForward:
    """Tests for ee_forward."""

    def test_constant_image(self):
        """Test that constants give zero edges and pass through as the last channel."""
        x = np.full((1, 1, 6, 6), 0.5, np.float32)
        out = ee_forward(SobelBank.initial(4), x)
        # zero padding makes the border respond; the interior must not
        assert not out[:, :4, 1:-1, 1:-1].any()
        np.testing.assert_array_equal(out[:, 4:], x)

    def test_ramp_interior(self):
        """Test that the vertical-pattern channel is 8 on a column ramp interior."""
        x = np.tile(np.arange(6, dtype=np.float32), (6, 1))[None, None]
        out = ee_forward(SobelBank.initial(4), x)
        np.testing.assert_array_equal(out[0, 0, 1:-1, 1:-1], np.full((4, 4), 8.0))

    def test_channel_count(self):
        """Test that 32 filters give 33 output channels."""
        out = ee_forward(SobelBank.initial(32), np.zeros((2, 1, 5, 5), np.float32))
        assert out.shape == (2, 33, 5, 5)

    def test_factor_homogeneity(self):
        """Test that doubling every factor doubles the edge maps and keeps the image channel."""
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(2, 1, 7, 9))
        factors = rng.uniform(0.5, 1.5, size=8)
        base = ee_forward(SobelBank(factors), x)
        doubled = ee_forward(SobelBank(2 * factors), x)
        np.testing.assert_array_equal(doubled[:, :8], 2 * base[:, :8])
        np.testing.assert_array_equal(doubled[:, 8:], base[:, 8:])

    def test_rejects_multichannel(self):
        """Test that only single-channel images are accepted."""
        with pytest.raises(ShapeMismatchError, match="channels"):
            ee_forward(SobelBank.initial(4), np.zeros((1, 2, 5, 5)))

    def test_rejects_small(self):
        """Test that images below 3x3 are rejected."""
        with pytest.raises(ShapeMismatchError, match="spatial"):
            ee_forward(SobelBank.initial(4), np.zeros((1, 1, 2, 5)))


class TestEdgeBackward:
    """Tests for ee_backward."""

    def test_zero_gradient(self):
        """Test that a zero upstream gradient gives zero gradients."""
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
        gx, gf = ee_backward(SobelBank.initial(4, np.float64), x, np.zeros((1, 5, 5, 5)))
        assert not gx.any() and not gf.any()

    def test_constant_image_no_factor_gradient(self):
        """Test that an interior-only constant response gives zero factor gradients."""
        x = np.full((1, 1, 7, 7), 0.5)
        g = np.zeros((1, 5, 7, 7))
        g[:, :, 1:-1, 1:-1] = np.random.default_rng(1).standard_normal((1, 5, 5, 5))
        _, gf = ee_backward(SobelBank.initial(4, np.float64), x, g)
        np.testing.assert_allclose(gf, 0.0, atol=1e-12)

    def test_linear_in_grad_out(self):
        """Test that both gradients are linear in the upstream gradient."""
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 6, 6))
        bank = SobelBank(rng.uniform(0.5, 1.5, size=4))
        g1, g2 = rng.standard_normal((1, 5, 6, 6)), rng.standard_normal((1, 5, 6, 6))
        mixed = ee_backward(bank, x, 0.3 * g1 + 2.0 * g2)
        for m, first, second in zip(mixed, ee_backward(bank, x, g1), ee_backward(bank, x, g2)):
            np.testing.assert_allclose(m, 0.3 * first + 2.0 * second, rtol=1e-10, atol=1e-12)

    def test_finite_differences(self):
        """Test factor and input gradients against central differences."""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 8, 8))
        factors = rng.uniform(0.5, 1.5, size=8)
        readout = rng.standard_normal((1, 9, 8, 8))

        def loss_fn(params):
            xx, ff = params
            bank = SobelBank(ff)
            value = float(np.sum(readout * ee_forward(bank, xx)))
            gx, gf = ee_backward(bank, xx, readout)
            return value, [gx, gf]

        assert finite_diff_check(loss_fn, [x, factors], eps=1e-4) < 1e-4

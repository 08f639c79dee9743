from dataclasses import replace

import numpy as np
import pytest

from edcnn.errors import BadMagicError, CheckpointShapeError, ConfigError, ShapeMismatchError
from edcnn.losses import (
    build_extractor,
    compound_loss,
    extractor_forward,
    extractor_relu_signs,
    load_extractor,
    ms_perceptual_loss,
    mse_loss,
    reflect_pad,
    reflect_pad_backward,
    save_extractor,
    seeded_extractor,
)
from edcnn.models import ExtractorConfig, LossConfig, LossMode
from edcnn.tensor import finite_diff_check


def single_input(fn):
    """Adapts a (value, grad) loss of one tensor to the checker's list interface."""

    def loss_fn(params):
        value, grad = fn(params[0])
        return value, [grad]

    return loss_fn


@pytest.fixture(scope="module")
def extractor():
    return seeded_extractor(seed=0)


@pytest.fixture(scope="module")
def extractor64(extractor):
    return extractor.astype(np.float64)


class TestMseLoss:
    """Tests for mse_loss."""

    def test_identical(self):
        """Test that identical inputs give zero loss and zero gradient."""
        a = np.random.default_rng(0).uniform(size=(1, 1, 4, 4))
        value, grad = mse_loss(a, a)
        assert value == 0.0
        assert not grad.any()

    def test_constant_offset(self):
        """Test that a constant difference of 0.5 gives 0.25."""
        a = np.zeros((1, 1, 4, 4))
        assert mse_loss(a + 0.5, a)[0] == 0.25

    def test_scalar_oracle(self):
        """Test agreement with a scalar loop and central differences."""
        rng = np.random.default_rng(1)
        pred, target = rng.uniform(size=(2, 1, 4, 4)), rng.uniform(size=(2, 1, 4, 4))
        total = 0.0
        for p, t in zip(pred.ravel(), target.ravel()):
            total += (p - t) ** 2
        assert mse_loss(pred, target)[0] == pytest.approx(total / pred.size, abs=1e-7)
        assert finite_diff_check(single_input(lambda p: mse_loss(p, target)), [pred], eps=1e-6) < 1e-6

    def test_shape_mismatch(self):
        """Test that shapes must agree."""
        with pytest.raises(ShapeMismatchError):
            mse_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


class TestExtractor:
    """Tests for the frozen feature extractor."""

    def test_stage_shapes(self, extractor):
        """Test that each stage halves the size of a 64x64 input."""
        feats = extractor_forward(extractor, np.zeros((1, 1, 64, 64), np.float32))
        assert [f.shape for f in feats] == [
            (1, 16, 32, 32),
            (1, 32, 16, 16),
            (1, 64, 8, 8),
            (1, 128, 4, 4),
        ]

    def test_padding_to_multiple_of_16(self, extractor):
        """Test that sizes are reflect-padded up to a multiple of 16."""
        feats = extractor_forward(extractor, np.zeros((1, 1, 20, 33), np.float32))
        assert feats[0].shape[2:] == (16, 24)
        assert feats[3].shape[2:] == (2, 3)

    def test_zero_input(self, extractor):
        """Test that a zero input with zero biases gives zero features."""
        feats = extractor_forward(extractor, np.zeros((1, 1, 32, 32), np.float32))
        assert all(not f.any() for f in feats)

    def test_deterministic(self, extractor):
        """Test that the same seed gives bit-identical features."""
        x = np.random.default_rng(2).uniform(size=(1, 1, 32, 32)).astype(np.float32)
        other = seeded_extractor(seed=0)
        for a, b in zip(extractor_forward(extractor, x), extractor_forward(other, x)):
            assert a.tobytes() == b.tobytes()

    def test_weights_read_only(self, extractor):
        """Test that extractor weights cannot be modified in place."""
        with pytest.raises(ValueError):
            extractor.params["stage1.conv"][0, 0, 0, 0] = 1.0

    def test_too_small(self, extractor):
        """Test that inputs below 16x16 are rejected."""
        with pytest.raises(ShapeMismatchError, match="spatial"):
            extractor_forward(extractor, np.zeros((1, 1, 15, 32), np.float32))

    def test_reflect_pad(self):
        """Test bottom/right reflection and the adjoint used in backward."""
        x = np.arange(17, dtype=np.float64).reshape(1, 1, 1, 17).repeat(16, axis=2)
        padded, index = reflect_pad(x)
        assert padded.shape == (1, 1, 16, 32)
        np.testing.assert_array_equal(padded[0, 0, 0, 17:20], [15, 14, 13])
        grad = reflect_pad_backward(np.ones_like(padded), index, x.shape)
        assert grad.sum() == padded.size
        assert grad[0, 0, 0, 15] == 2.0


class TestExtractorFile:
    """Tests for exporting and importing extractor weights."""

    def test_round_trip(self, tmp_path, extractor):
        """Test that exported weights load back identically."""
        path = tmp_path / "ext.edx"
        save_extractor(extractor, path)
        loaded = load_extractor(path)
        assert loaded.stage_channels == (16, 32, 64, 128)
        assert loaded.source == "file"
        for name, p in extractor.params.items():
            assert loaded.params[name].tobytes() == p.tobytes()

    def test_build_from_path(self, tmp_path, extractor):
        """Test that a configured path takes precedence over the seed."""
        path = tmp_path / "ext.edx"
        save_extractor(seeded_extractor(seed=9), path)
        built = build_extractor(ExtractorConfig(seed=0, path=str(path)))
        assert built.params["stage1.conv"].tobytes() != extractor.params["stage1.conv"].tobytes()

    def test_custom_channels(self, tmp_path):
        """Test that other stage widths survive the round trip."""
        path = tmp_path / "narrow.edx"
        save_extractor(seeded_extractor((4, 8, 8, 16), seed=1), path)
        assert load_extractor(path).stage_channels == (4, 8, 8, 16)

    def test_model_file_rejected(self, tmp_path):
        """Test that a model checkpoint is not accepted as an extractor."""
        from edcnn.checkpoint import save_checkpoint
        from edcnn.models import ModelConfig
        from edcnn.network import init_model

        path = tmp_path / "model.edc"
        save_checkpoint(init_model(ModelConfig(n_blocks=1)), path)
        with pytest.raises(BadMagicError):
            load_extractor(path)

    def test_wrong_stage_count(self):
        """Test that extractors need exactly four stages."""
        with pytest.raises(ConfigError):
            seeded_extractor((16, 32, 64))

    def test_inconsistent_shapes(self, tmp_path, extractor):
        """Test that mismatching stage tensors are rejected."""
        from edcnn.checkpoint import EXTRACTOR_MAGIC, ContainerHeader, write_container

        params = dict(extractor.params)
        params["stage2.conv"] = np.zeros((32, 16, 3, 3), np.float32)
        path = tmp_path / "bad.edx"
        write_container(path, EXTRACTOR_MAGIC, ContainerHeader(4, 16, 0, 0), params)
        with pytest.raises(CheckpointShapeError):
            load_extractor(path)


class TestPerceptualLoss:
    """Tests for ms_perceptual_loss."""

    def test_identical(self, extractor):
        """Test that identical inputs give zero."""
        x = np.random.default_rng(3).uniform(size=(1, 1, 16, 16)).astype(np.float32)
        assert ms_perceptual_loss(extractor, x, x)[0] == 0.0

    def test_stage_subsets_differ(self, extractor64):
        """Test that S-4 and S-4321 differ and match per-stage MSE averages."""
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(1, 1, 32, 32)), rng.uniform(size=(1, 1, 32, 32))
        fa, fb = extractor_forward(extractor64, a), extractor_forward(extractor64, b)
        per_stage = [np.mean((x - y) ** 2) for x, y in zip(fa, fb)]
        s4 = ms_perceptual_loss(extractor64, a, b, (4,))[0]
        s4321 = ms_perceptual_loss(extractor64, a, b, (1, 2, 3, 4))[0]
        assert s4 == pytest.approx(per_stage[3], rel=1e-12)
        assert s4321 == pytest.approx(np.mean(per_stage), rel=1e-12)
        assert s4 != s4321

    @pytest.mark.parametrize("stages", [(4,), (3, 4), (2, 3, 4), (1, 2, 3, 4)])
    def test_finite_differences(self, extractor64, stages):
        """Test the input gradient on 16x16 inputs for every stage subset."""
        rng = np.random.default_rng(5)
        pred, target = rng.uniform(size=(1, 1, 16, 16)), rng.uniform(size=(1, 1, 16, 16))
        err = finite_diff_check(
            single_input(lambda p: ms_perceptual_loss(extractor64, p, target, stages)),
            [pred],
            eps=1e-6,
            max_elements=24,
            kinks=lambda ps: extractor_relu_signs(extractor64, ps[0], max(stages)),
        )
        assert err < 1e-3

    def test_unpadded_size_gradient(self, extractor64):
        """Test the gradient through reflect padding on a non-multiple size."""
        rng = np.random.default_rng(6)
        pred, target = rng.uniform(size=(1, 1, 18, 21)), rng.uniform(size=(1, 1, 18, 21))
        err = finite_diff_check(
            single_input(lambda p: ms_perceptual_loss(extractor64, p, target)),
            [pred],
            eps=1e-6,
            max_elements=24,
            kinks=lambda ps: extractor_relu_signs(extractor64, ps[0]),
        )
        assert err < 1e-3

    def test_empty_stages(self, extractor):
        """Test that an empty stage selection is rejected."""
        x = np.zeros((1, 1, 16, 16), np.float32)
        with pytest.raises(ConfigError):
            ms_perceptual_loss(extractor, x, x, ())


class TestCompoundLoss:
    """Tests for compound_loss."""

    def test_weighted_sum(self, extractor64):
        """Test that compound equals mse + 0.01 * perceptual to 1e-12."""
        rng = np.random.default_rng(7)
        pred, target = rng.uniform(size=(2, 1, 16, 16)), rng.uniform(size=(2, 1, 16, 16))
        cfg = LossConfig()
        value, grad = compound_loss(cfg, extractor64, pred, target)
        mse, mse_grad = mse_loss(pred, target)
        perc, perc_grad = ms_perceptual_loss(extractor64, pred, target)
        assert value == pytest.approx(mse + 0.01 * perc, rel=1e-12)
        np.testing.assert_allclose(grad, mse_grad + 0.01 * perc_grad, rtol=1e-12)

    def test_zero_weight_is_mse(self, extractor):
        """Test that w_p = 0 collapses to MSE bit-for-bit."""
        rng = np.random.default_rng(8)
        pred = rng.uniform(size=(1, 1, 16, 16)).astype(np.float32)
        target = rng.uniform(size=(1, 1, 16, 16)).astype(np.float32)
        value, grad = compound_loss(LossConfig(w_p=0.0), extractor, pred, target)
        mse, mse_grad = mse_loss(pred, target)
        assert value == mse
        assert grad.tobytes() == mse_grad.tobytes()

    def test_modes(self, extractor64):
        """Test that mse_only and perceptual_only select a single term."""
        rng = np.random.default_rng(9)
        pred, target = rng.uniform(size=(1, 1, 16, 16)), rng.uniform(size=(1, 1, 16, 16))
        cfg = LossConfig()
        mse_only = compound_loss(replace(cfg, mode=LossMode.MSE_ONLY), extractor64, pred, target)[0]
        perc_only = compound_loss(replace(cfg, mode=LossMode.PERCEPTUAL_ONLY), extractor64, pred, target)[0]
        assert mse_only == mse_loss(pred, target)[0]
        assert perc_only == ms_perceptual_loss(extractor64, pred, target)[0]

    def test_mse_only_needs_no_extractor(self):
        """Test that the MSE-only mode works without an extractor."""
        x = np.zeros((1, 1, 8, 8))
        value, _ = compound_loss(LossConfig(mode=LossMode.MSE_ONLY), None, x + 0.5, x)
        assert value == 0.25

    def test_default_weight(self):
        """Test that the default perceptual weight is 0.01."""
        assert LossConfig().w_p == 0.01

from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np

from edcnn.checkpoint import save_checkpoint
from edcnn.container import Container
from edcnn.losses import FrozenExtractor, save_extractor, seeded_extractor
from edcnn.models import ExtractorConfig, ModelConfig
from edcnn.network import Model, init_model
from edcnn.watcher import DenoiseWatcher


class TestContainer:
    """Tests for dependency injection container."""

    def test_seeded_extractor(self):
        """Test that container builds the seeded extractor by default."""
        container = Container()
        ext = container.extractor(ExtractorConfig())
        assert isinstance(ext, FrozenExtractor)
        assert ext.source == "seeded"
        assert ext.stage_channels == (16, 32, 64, 128)

    def test_extractor_from_file(self, tmp_path):
        """Test that a configured path loads the extractor from disk."""
        path = tmp_path / "ext.edx"
        save_extractor(seeded_extractor(seed=3), path)
        ext = Container().extractor(ExtractorConfig(path=str(path)))
        assert ext.source == "file"
        np.testing.assert_array_equal(ext.params["stage1.conv"], seeded_extractor(seed=3).params["stage1.conv"])

    def test_model(self, tmp_path):
        """Test that container loads a checkpoint."""
        cfg = ModelConfig(n_blocks=1, block_filters=4, sobel_filters=4)
        path = tmp_path / "m.edc"
        save_checkpoint(init_model(cfg), path)
        model = Container().model(path)
        assert isinstance(model, Model)
        assert model.config.n_blocks == 1

    @patch("edcnn.watcher.Observer")
    def test_denoise_watcher(self, mock_observer_cls):
        """Test that container creates DenoiseWatcher."""
        fn = MagicMock()
        watcher = Container().denoise_watcher(Path("/in"), Path("/out"), fn)
        assert isinstance(watcher, DenoiseWatcher)
        assert watcher.in_dir == Path("/in")
        assert watcher.handler.denoise_file == fn

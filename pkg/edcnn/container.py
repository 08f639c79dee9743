from pathlib import Path
from typing import Optional

from .checkpoint import load_checkpoint
from .losses import FrozenExtractor, build_extractor
from .models import ExtractorConfig, ModelConfig
from .network import Model
from .watcher import DenoiseFn, DenoiseWatcher


class Container:
    """Provider container for dependencies."""

    def extractor(self, cfg: ExtractorConfig) -> FrozenExtractor:
        return build_extractor(cfg)

    def model(self, checkpoint: Path, expect: Optional[ModelConfig] = None) -> Model:
        return load_checkpoint(checkpoint, expect)

    def denoise_watcher(self, in_dir: Path, out_dir: Path, denoise_file: DenoiseFn) -> DenoiseWatcher:
        return DenoiseWatcher(in_dir, out_dir, denoise_file)

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Topology of the denoiser. Defaults reproduce the full EDCNN."""

    n_blocks: int = 8
    block_filters: int = 32
    sobel_filters: int = 32
    use_edge_module: bool = True
    use_dense_connections: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be positive, got {self.n_blocks}")
        if self.block_filters < 1:
            raise ConfigError(
                f"block_filters must be positive, got {self.block_filters}"
            )
        if self.sobel_filters < 4 or self.sobel_filters % 4 != 0:
            raise ConfigError(
                f"sobel_filters must be a positive multiple of 4, got {self.sobel_filters}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    @property
    def edge_channels(self) -> int:
        """Channels of the tensor fed to every block (edge maps + image, or image)."""
        return self.sobel_filters + 1 if self.use_edge_module else 1

    def block_in_channels(self, k: int) -> int:
        if k == 0:
            return self.edge_channels
        if self.use_dense_connections:
            return self.block_filters + self.edge_channels
        return self.block_filters

    @property
    def variant(self) -> str:
        if self.use_edge_module and self.use_dense_connections:
            return "EDCNN"
        if self.use_dense_connections:
            return "BCNN+DC"
        if self.use_edge_module:
            return "BCNN+EM"
        return "BCNN"

    @classmethod
    def for_variant(cls, name: str, **kwargs) -> "ModelConfig":
        flags = {
            "BCNN": (False, False),
            "BCNN+DC": (False, True),
            "BCNN+EM": (True, False),
            "EDCNN": (True, True),
        }
        if name not in flags:
            raise ConfigError(f"Unknown model variant: {name}")
        edge, dense = flags[name]
        return cls(use_edge_module=edge, use_dense_connections=dense, **kwargs)


class LossMode(Enum):
    MSE_ONLY = "mse_only"
    PERCEPTUAL_ONLY = "perceptual_only"
    COMPOUND = "compound"


@dataclass(frozen=True)
class LossConfig:
    w_p: float = 0.01
    mode: LossMode = LossMode.COMPOUND
    stages_used: Tuple[int, ...] = (1, 2, 3, 4)

    def validate(self) -> None:
        if self.w_p < 0:
            raise ConfigError(f"w_p must be non-negative, got {self.w_p}")
        if not self.stages_used:
            raise ConfigError("stages_used must not be empty")
        bad = [s for s in self.stages_used if s not in (1, 2, 3, 4)]
        if bad:
            raise ConfigError(f"stages_used entries must be in 1..4, got {bad}")

    @property
    def needs_extractor(self) -> bool:
        return self.mode is not LossMode.MSE_ONLY


@dataclass(frozen=True)
class ExtractorConfig:
    """Frozen feature extractor: seeded weights unless a weight file is given."""

    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0
    path: Optional[str] = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    images_per_batch: int = 32
    patches_per_image: int = 4
    patch_size: int = 64
    checkpoint_every: int = 10
    seed: int = 0
    log_wall_time: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(
                f"learning_rate must be non-negative, got {self.learning_rate}"
            )
        for name in ("epochs", "images_per_batch", "patches_per_image", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"checkpoint_every must be non-negative, got {self.checkpoint_every}"
            )
        self.loss.validate()
        self.model.validate()

    @property
    def patches_per_batch(self) -> int:
        return self.images_per_batch * self.patches_per_image


@dataclass(frozen=True)
class ImagePair:
    name: str
    low: Path
    high: Path


@dataclass(frozen=True)
class PairedDataset:
    pairs: List[ImagePair]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class EpochRecord:
    epoch: int
    mean_train_loss: float
    mean_test_psnr: float
    mean_test_ssim: float
    wall_seconds: float

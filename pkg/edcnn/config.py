import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

from .errors import ConfigError
from .models import ExtractorConfig, LossConfig, LossMode, ModelConfig, TrainConfig

COMMANDS = ("synth", "train", "denoise", "eval", "gradcheck", "ablate", "export-extractor", "replay")


@dataclass(frozen=True)
class Config:
    command: str
    seed: Optional[int] = None
    threads: int = 1
    config_path: Optional[str] = None
    log_file: Optional[str] = None
    verbose: bool = False
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    in_path: Optional[str] = None
    out_path: Optional[str] = None
    count: int = 200
    size: int = 64
    dose_factor: float = 0.25
    test_count: int = 0
    loss: Optional[str] = None
    epochs: Optional[int] = None
    watch: bool = False
    eps: float = 1e-5
    samples: int = 4
    seeds: Tuple[int, ...] = (0, 1, 2)
    manifest: Optional[str] = None
    argv: Tuple[str, ...] = ()

    @property
    def deterministic(self) -> bool:
        return self.threads == 1

    @classmethod
    def from_cli(cls, argv: Optional[Sequence[str]] = None) -> "Config":
        """Parses config from CLI with defaults."""
        argv = list(sys.argv[1:] if argv is None else argv)
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--seed", type=int, default=None, help="Seed (u64) overriding the config file")
        common.add_argument(
            "--threads",
            type=int,
            default=1,
            help="Worker threads for per-image work (default: 1; >1 is not bit-reproducible)",
        )
        common.add_argument("--config", dest="config_path", default=None, help="key=value config file")
        common.add_argument("--log-file", default=None, help="Log file path (default: stdout)")
        common.add_argument("--verbose", action="store_true", help="Debug logging")

        parser = argparse.ArgumentParser(
            prog="edcnn", description="EDCNN low-dose CT denoiser"
        )
        sub = parser.add_subparsers(dest="command", required=True)

        p = sub.add_parser("synth", parents=[common], help="Write synthetic phantom pairs")
        p.add_argument("out_dir")
        p.add_argument("--count", type=int, default=cls.count, help="Training pairs (default: 200)")
        p.add_argument("--test-count", type=int, default=cls.test_count, help="Test pairs (default: 0)")
        p.add_argument("--size", type=int, default=cls.size, help="Image size (default: 64)")
        p.add_argument("--dose-factor", type=float, default=cls.dose_factor, help="Dose in (0, 1] (default: 0.25)")

        p = sub.add_parser("train", parents=[common], help="Train a model")
        p.add_argument("data_dir")
        p.add_argument("out_dir")
        p.add_argument("--loss", choices=[m.value for m in LossMode], default=None)
        p.add_argument("--epochs", type=int, default=None)

        p = sub.add_parser("denoise", parents=[common], help="Denoise an image or a directory")
        p.add_argument("checkpoint")
        p.add_argument("in_path")
        p.add_argument("out_path")
        p.add_argument("--watch", action="store_true", help="Keep denoising new files in in_path")

        p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on paired data")
        p.add_argument("checkpoint")
        p.add_argument("data_dir")
        p.add_argument("--out-dir", default="eval_report")

        p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
        p.add_argument("--out-dir", default="gradcheck")
        p.add_argument("--eps", type=float, default=cls.eps)
        p.add_argument("--samples", type=int, default=cls.samples, help="Elements checked per parameter")

        p = sub.add_parser("ablate", parents=[common], help="BCNN / BCNN+DC / EDCNN ablation")
        p.add_argument("data_dir")
        p.add_argument("out_dir")
        p.add_argument("--seeds", type=int, nargs="+", default=list(cls.seeds))
        p.add_argument("--loss", choices=[m.value for m in LossMode], default=None)
        p.add_argument("--epochs", type=int, default=None)

        p = sub.add_parser("export-extractor", parents=[common], help="Write the frozen extractor weights")
        p.add_argument("out_path")

        p = sub.add_parser("replay", parents=[common], help="Re-run the command stored in a manifest")
        p.add_argument("manifest")

        args = parser.parse_args(argv)
        if args.threads < 1:
            parser.error("--threads must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            parser.error("--seed must fit in 64 unsigned bits")
        values = {k: v for k, v in vars(args).items() if k in cls.__dataclass_fields__}
        if "seeds" in values:
            values["seeds"] = tuple(values["seeds"])
        return cls(argv=tuple(argv), **values)


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_stages(value: str) -> Tuple[int, ...]:
    stages = tuple(sorted({int(s) for s in value.replace(" ", "").split(",") if s}))
    if not stages:
        raise ValueError("empty stage list")
    return stages


def _parse_optional_str(value: str) -> Optional[str]:
    return value or None


# key -> (section, field, parser)
_KEYS: Dict[str, Tuple[str, str, Callable[[str], object]]] = {
    "learning_rate": ("train", "learning_rate", float),
    "epochs": ("train", "epochs", int),
    "images_per_batch": ("train", "images_per_batch", int),
    "patches_per_image": ("train", "patches_per_image", int),
    "patch_size": ("train", "patch_size", int),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "seed": ("train", "seed", int),
    "log_wall_time": ("train", "log_wall_time", _parse_bool),
    "loss_mode": ("loss", "mode", LossMode),
    "w_p": ("loss", "w_p", float),
    "stages_used": ("loss", "stages_used", _parse_stages),
    "extractor_seed": ("extractor", "seed", int),
    "extractor_path": ("extractor", "path", _parse_optional_str),
    "n_blocks": ("model", "n_blocks", int),
    "block_filters": ("model", "block_filters", int),
    "sobel_filters": ("model", "sobel_filters", int),
    "use_edge_module": ("model", "use_edge_module", _parse_bool),
    "use_dense_connections": ("model", "use_dense_connections", _parse_bool),
}


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    sections: Dict[str, Dict[str, object]] = {
        "train": {},
        "loss": {},
        "extractor": {},
        "model": {},
    }
    seen: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' (first on line {seen[key]})")
        seen[key] = lineno
        section, name, parse = _KEYS[key]
        try:
            sections[section][name] = parse(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {e}") from e

    model_seed = sections["train"].get("seed", 0)
    cfg = TrainConfig(
        loss=LossConfig(**sections["loss"]),
        model=ModelConfig(seed=model_seed, **sections["model"]),
        extractor=ExtractorConfig(**sections["extractor"]),
        **sections["train"],
    )
    try:
        cfg.validate()
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e
    return cfg


def load_config_file(path: Optional[str]) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, str(path))


def apply_overrides(
    cfg: TrainConfig,
    seed: Optional[int] = None,
    loss: Optional[str] = None,
    epochs: Optional[int] = None,
) -> TrainConfig:
    """CLI flags win over the config file."""
    if seed is not None:
        cfg = replace(cfg, seed=seed, model=replace(cfg.model, seed=seed))
    if loss is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, mode=LossMode(loss)))
    if epochs is not None:
        cfg = replace(cfg, epochs=epochs)
    cfg.validate()
    return cfg


def config_items(cfg: TrainConfig) -> Dict[str, str]:
    """Every recognised key with its resolved value, formatted as the parser reads it."""

    def fmt(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, LossMode):
            return value.value
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        if value is None:
            return ""
        return repr(value) if isinstance(value, float) else str(value)

    objects = {"train": cfg, "loss": cfg.loss, "extractor": cfg.extractor, "model": cfg.model}
    return {key: fmt(getattr(objects[section], name)) for key, (section, name, _) in _KEYS.items()}


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in config_items(cfg).items())

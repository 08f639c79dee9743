from pathlib import Path
from unittest.mock import patch

import pytest

from edcnn.config import (
    Config,
    apply_overrides,
    dump_config,
    load_config_file,
    parse_config_text,
)
from edcnn.errors import ConfigError
from edcnn.models import LossMode, TrainConfig

DEFAULT_CONF = Path(__file__).resolve().parent.parent / "configs" / "default.conf"


class TestConfig:
    """Tests for Config dataclass and CLI parsing."""

    def test_default_values(self):
        """Test that Config has correct default values."""
        config = Config(command="train")
        assert config.seed is None
        assert config.threads == 1
        assert config.config_path is None
        assert config.log_file is None
        assert config.deterministic is True

    def test_frozen_dataclass(self):
        """Test that Config is immutable (frozen)."""
        config = Config(command="train")
        with pytest.raises(AttributeError):
            config.threads = 4

    @patch("sys.argv", ["edcnn", "train", "data", "runs/a"])
    def test_from_cli_reads_sys_argv(self):
        """Test CLI parsing from sys.argv."""
        config = Config.from_cli()
        assert config.command == "train"
        assert config.data_dir == "data"
        assert config.out_dir == "runs/a"
        assert config.argv == ("train", "data", "runs/a")

    def test_from_cli_global_flags(self):
        """Test the global flags after the command name."""
        config = Config.from_cli(
            ["gradcheck", "--seed", "42", "--threads", "3", "--config", "x.conf", "--log-file", "run.log", "--verbose"]
        )
        assert config.seed == 42
        assert config.threads == 3
        assert config.deterministic is False
        assert config.config_path == "x.conf"
        assert config.log_file == "run.log"
        assert config.verbose is True

    def test_from_cli_synth(self):
        """Test synth options and their defaults."""
        config = Config.from_cli(["synth", "out", "--count", "10", "--test-count", "2", "--dose-factor", "0.5"])
        assert (config.count, config.test_count, config.size, config.dose_factor) == (10, 2, 64, 0.5)

    def test_from_cli_train_overrides(self):
        """Test the training overrides."""
        config = Config.from_cli(["train", "d", "o", "--loss", "mse_only", "--epochs", "3"])
        assert config.loss == "mse_only"
        assert config.epochs == 3

    def test_from_cli_denoise_watch(self):
        """Test denoise positional arguments and watch mode."""
        config = Config.from_cli(["denoise", "m.edc", "in", "out", "--watch"])
        assert (config.checkpoint, config.in_path, config.out_path, config.watch) == ("m.edc", "in", "out", True)

    def test_from_cli_ablate_seeds(self):
        """Test that ablation seeds are collected as a tuple."""
        config = Config.from_cli(["ablate", "d", "o", "--seeds", "3", "4"])
        assert config.seeds == (3, 4)

    def test_from_cli_rejects_zero_threads(self):
        """Test that --threads must be positive."""
        with pytest.raises(SystemExit):
            Config.from_cli(["gradcheck", "--threads", "0"])

    def test_from_cli_rejects_negative_seed(self):
        """Test that seeds are unsigned 64-bit."""
        with pytest.raises(SystemExit):
            Config.from_cli(["gradcheck", "--seed", "-1"])

    def test_from_cli_requires_command(self):
        """Test that a command is required."""
        with pytest.raises(SystemExit):
            Config.from_cli([])


class TestConfigFile:
    """Tests for the key=value configuration file."""

    def test_default_file_matches_defaults(self):
        """Test that configs/default.conf reproduces the training defaults."""
        cfg = load_config_file(str(DEFAULT_CONF))
        assert cfg == TrainConfig()
        assert cfg.learning_rate == 0.001
        assert cfg.epochs == 200
        assert cfg.loss.w_p == 0.01
        assert (cfg.patch_size, cfg.patches_per_image, cfg.images_per_batch) == (64, 4, 32)

    def test_no_file(self):
        """Test that no path means defaults."""
        assert load_config_file(None) == TrainConfig()

    def test_comments_and_values(self):
        """Test comments, blank lines and typed values."""
        cfg = parse_config_text(
            "# header\n\nepochs = 5  # short run\nloss_mode = perceptual_only\n"
            "stages_used = 4,3\nuse_edge_module = false\nseed = 9\n"
        )
        assert cfg.epochs == 5
        assert cfg.loss.mode is LossMode.PERCEPTUAL_ONLY
        assert cfg.loss.stages_used == (3, 4)
        assert cfg.model.use_edge_module is False
        assert cfg.seed == 9 and cfg.model.seed == 9

    def test_unknown_key(self):
        """Test that unknown keys are errors naming line and key."""
        with pytest.raises(ConfigError, match=r"run.conf:2: unknown key 'lr'"):
            parse_config_text("epochs = 1\nlr = 0.1\n", "run.conf")

    def test_bad_value(self):
        """Test that unparsable values name the key."""
        with pytest.raises(ConfigError, match="bad value for 'epochs'"):
            parse_config_text("epochs = many\n")

    def test_bad_loss_mode(self):
        """Test that unknown loss modes are rejected."""
        with pytest.raises(ConfigError, match="loss_mode"):
            parse_config_text("loss_mode = l1\n")

    def test_missing_equals(self):
        """Test that lines without '=' are rejected."""
        with pytest.raises(ConfigError, match=":1:"):
            parse_config_text("epochs 3\n")

    def test_duplicate_key(self):
        """Test that repeated keys are rejected."""
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("epochs = 1\nepochs = 2\n")

    def test_semantic_validation(self):
        """Test that out-of-range values are rejected after parsing."""
        with pytest.raises(ConfigError, match="sobel_filters"):
            parse_config_text("sobel_filters = 6\n")

    def test_unreadable_file(self, tmp_path):
        """Test that a missing file is a ConfigError."""
        with pytest.raises(ConfigError, match="cannot read"):
            load_config_file(str(tmp_path / "missing.conf"))

    def test_dump_round_trip(self):
        """Test that a dumped configuration parses back to itself."""
        cfg = parse_config_text("epochs = 7\nw_p = 0.5\nextractor_path = ext.edx\nlog_wall_time = true\n")
        assert parse_config_text(dump_config(cfg)) == cfg

    def test_overrides(self):
        """Test that CLI overrides replace file values."""
        cfg = apply_overrides(TrainConfig(), seed=5, loss="mse_only", epochs=3)
        assert cfg.seed == 5 and cfg.model.seed == 5
        assert cfg.loss.mode is LossMode.MSE_ONLY
        assert cfg.epochs == 3

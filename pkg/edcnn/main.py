import csv
import logging
import logging.handlers
import signal
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import network
from .config import Config, apply_overrides, config_items, dump_config, load_config_file
from .container import Container
from .data import (
    TEST_SEED_OFFSET,
    load_dataset,
    load_pairs,
    read_pair,
    read_pgm,
    write_pgm,
    write_synthetic_split,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    ImageFormatError,
    NonFiniteError,
    ShapeMismatchError,
    StaleCacheError,
    TrainingError,
)
from .losses import (
    FrozenExtractor,
    compound_loss,
    extractor_relu_signs,
    save_extractor,
    seeded_extractor,
)
from .manifest import RunManifest, manifest_path_for, read_manifest, write_manifest
from .metrics import feature_distance, psnr, rmse, ssim
from .models import LossConfig, LossMode, PairedDataset, TrainConfig
from .network import Model, forward, init_model, num_params, predict, relu_signs
from .tensor import finite_diff_errors
from .trainer import ablation_study, denoise_image, train

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_SIZE = 16
GRADCHECK_STAGE_SUBSETS = ((4,), (3, 4), (2, 3, 4), (1, 2, 3, 4))
METRICS = ("psnr", "ssim", "rmse", "feature_distance")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 2

CommandFn = Callable[[Config, Container], int]


def setup_logging(log_file: Optional[str], verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    format_str = "%(asctime)s - %(levelname)s - %(message)s"
    if log_file:
        handler = logging.handlers.RotatingFileHandler(
            log_file, maxBytes=10 * 1024 * 1024, backupCount=5
        )
        logging.basicConfig(
            handlers=[handler], level=level, format=format_str, force=True
        )
    else:
        logging.basicConfig(
            stream=sys.stdout, level=level, format=format_str, force=True
        )


def _train_config(config: Config) -> TrainConfig:
    return apply_overrides(
        load_config_file(config.config_path), config.seed, config.loss, config.epochs
    )


def _manifest(
    config: Config, train_cfg: Optional[TrainConfig] = None, seed: Optional[int] = None, **kwargs
) -> RunManifest:
    if seed is None:
        seed = config.seed if train_cfg is None else train_cfg.seed
    return RunManifest(
        command=config.command,
        argv=list(config.argv),
        config=config_items(train_cfg) if train_cfg is not None else {},
        seed=seed,
        threads=config.threads,
        **kwargs,
    )


def cmd_synth(config: Config, container: Container) -> int:
    if config.count < 1:
        raise ConfigError(f"--count must be positive, got {config.count}")
    if config.test_count < 0:
        raise ConfigError(f"--test-count must not be negative, got {config.test_count}")
    if not 0.0 < config.dose_factor <= 1.0:
        raise ConfigError(f"--dose-factor must be in (0, 1], got {config.dose_factor}")
    seed = config.seed if config.seed is not None else 0
    out = Path(config.out_dir)
    if config.test_count:
        written = write_synthetic_split(out / "train", config.count, config.size, config.dose_factor, seed)
        written += write_synthetic_split(
            out / "test", config.test_count, config.size, config.dose_factor, seed, TEST_SEED_OFFSET
        )
    else:
        written = write_synthetic_split(out, config.count, config.size, config.dose_factor, seed)
    manifest = _manifest(
        config,
        seed=seed,
        outputs=[str(p) for p in written],
        extra={
            "count": config.count,
            "test_count": config.test_count,
            "size": config.size,
            "dose_factor": config.dose_factor,
        },
    )
    write_manifest(manifest.finish(), manifest_path_for(out))
    return EXIT_OK


def cmd_train(config: Config, container: Container) -> int:
    cfg = _train_config(config)
    train_set, test_set = load_dataset(config.data_dir)
    extractor = container.extractor(cfg.extractor) if cfg.loss.needs_extractor else None
    model = init_model(cfg.model)
    logging.info(f"{cfg.model.variant} with {num_params(model)} trainable parameters")

    out = Path(config.out_dir)
    model, log = train(model, train_set, cfg, test=test_set, extractor=extractor, out_dir=out)
    (out / "config.conf").write_text(dump_config(cfg), encoding="utf-8")

    extra = {"num_params": num_params(model)}
    if model.bank is not None:
        extra["sobel_factors"] = [float(f) for f in model.bank.factors]
    if log.records:
        last = log.records[-1]
        extra["final_train_loss"] = last.mean_train_loss
        extra["final_test_psnr"] = last.mean_test_psnr
        extra["final_test_ssim"] = last.mean_test_ssim
    manifest = _manifest(
        config,
        cfg,
        inputs=[str(config.data_dir)] + ([cfg.extractor.path] if cfg.extractor.path else []),
        outputs=sorted(str(p) for p in out.iterdir() if p.suffix in (".edc", ".csv", ".conf")),
        extra=extra,
    )
    write_manifest(manifest.finish(), manifest_path_for(out))
    return EXIT_OK


def cmd_denoise(config: Config, container: Container) -> int:
    model = container.model(Path(config.checkpoint))
    src, dst = Path(config.in_path), Path(config.out_path)

    def denoise_file(in_file: Path, out_file: Path) -> None:
        image = read_pgm(in_file)
        write_pgm(out_file, denoise_image(model, image))
        logging.info(f"Denoised {in_file} -> {out_file} ({image.shape[3]}x{image.shape[2]})")

    if config.watch and not src.is_dir():
        raise ConfigError(f"--watch needs an input directory, got {src}")

    outputs: List[str] = []
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".pgm")
        if not files and not config.watch:
            raise DatasetError(f"no .pgm images in {src}")
        for f in files:
            denoise_file(f, dst / f.name)
            outputs.append(str(dst / f.name))
    else:
        denoise_file(src, dst)
        outputs.append(str(dst))
    manifest_file = manifest_path_for(dst)

    manifest = _manifest(
        config,
        inputs=[str(config.checkpoint), str(src)],
        outputs=outputs,
        extra={"variant": model.config.variant},
    )
    if not config.watch:
        write_manifest(manifest.finish(), manifest_file)
        return EXIT_OK

    with container.denoise_watcher(src, dst, denoise_file) as watcher:
        try:
            while True:
                time.sleep(1.0)
        except KeyboardInterrupt:
            pass
        finally:
            manifest.extra["watched"] = watcher.handler.processed
            write_manifest(manifest.finish(), manifest_file)
    return EXIT_OK


def _eval_split(data_dir: Path) -> PairedDataset:
    if (data_dir / "test").is_dir():
        return load_pairs(data_dir / "test", "test")
    if not data_dir.is_dir():
        raise DatasetError(f"data directory does not exist: {data_dir}")
    return load_pairs(data_dir, "test")


def _image_scores(
    model: Model, extractor: FrozenExtractor, low: np.ndarray, high: np.ndarray
) -> Dict[str, Dict[str, float]]:
    denoised = denoise_image(model, low)
    scores = {}
    for row, image in (("LDCT", low), (model.config.variant, denoised)):
        scores[row] = {
            "psnr": psnr(image, high),
            "ssim": ssim(image, high),
            "rmse": rmse(image, high),
            "feature_distance": feature_distance(extractor, image, high),
        }
    return scores


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(np.mean(arr)), float(np.std(arr))


def format_table(summary: Dict[str, Dict[str, Tuple[float, float]]]) -> str:
    header = f"{'Method':<10}" + "".join(f"{m.upper():>26}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for row, stats in summary.items():
        cells = "".join(f"{f'{mean:.4f} ± {std:.4f}':>26}" for mean, std in (stats[m] for m in METRICS))
        lines.append(f"{row:<10}" + cells)
    return "\n".join(lines)


def cmd_eval(config: Config, container: Container) -> int:
    cfg = load_config_file(config.config_path)
    model = container.model(Path(config.checkpoint))
    extractor = container.extractor(cfg.extractor)
    dataset = _eval_split(Path(config.data_dir))

    def score(pair):
        low, high = read_pair(pair)
        return _image_scores(model, extractor, low, high)

    if config.threads > 1:
        logging.info(f"Evaluating with {config.threads} threads (not bit-reproducible)")
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            per_image = list(pool.map(score, dataset.pairs))
    else:
        per_image = [score(pair) for pair in dataset.pairs]

    rows = list(per_image[0])
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_image.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image", "method", *METRICS])
        for pair, scores in zip(dataset.pairs, per_image):
            for row in rows:
                writer.writerow([pair.name, row, *(f"{scores[row][m]:.6f}" for m in METRICS)])

    summary = {
        row: {m: summarize([s[row][m] for s in per_image]) for m in METRICS} for row in rows
    }
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", *(f"{m}_{k}" for m in METRICS for k in ("mean", "std"))])
        for row, stats in summary.items():
            writer.writerow([row, *(f"{v:.6f}" for m in METRICS for v in stats[m])])
    table = format_table(summary)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    logging.info(f"Evaluation on {len(dataset)} images:\n{table}")

    manifest = _manifest(
        config,
        cfg,
        inputs=[str(config.checkpoint), str(config.data_dir)],
        outputs=[str(out / n) for n in ("per_image.csv", "summary.csv", "report.txt")],
        extra={"images": len(dataset), "summary": {r: {m: list(v) for m, v in s.items()} for r, s in summary.items()}},
    )
    write_manifest(manifest.finish(), manifest_path_for(out))
    return EXIT_OK


def _gradcheck_modes(cfg: TrainConfig) -> List[Tuple[str, LossConfig]]:
    modes = [("mse_only", replace(cfg.loss, mode=LossMode.MSE_ONLY))]
    for stages in GRADCHECK_STAGE_SUBSETS:
        label = "perceptual_only S-" + "".join(str(s) for s in reversed(stages))
        modes.append((label, replace(cfg.loss, mode=LossMode.PERCEPTUAL_ONLY, stages_used=stages)))
    modes.append(("compound", replace(cfg.loss, mode=LossMode.COMPOUND)))
    return modes


def gradient_report(
    cfg: TrainConfig, extractor: FrozenExtractor, eps: float, samples: Optional[int]
) -> List[Tuple[str, str, float]]:
    """(loss mode, parameter group, max relative error) for every group under every mode."""
    model = init_model(cfg.model).astype(np.float64)
    extractor = extractor.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    shape = (1, 1, GRADCHECK_SIZE, GRADCHECK_SIZE)
    x = rng.uniform(0.0, 1.0, size=shape)
    target = rng.uniform(0.0, 1.0, size=shape)
    names = list(model.params)
    params = [model.params[n] for n in names]

    report = []
    for label, loss_cfg in _gradcheck_modes(cfg):

        def loss_fn(_params):
            y, cache = forward(model, x)
            value, grad_y = compound_loss(loss_cfg, extractor, y, target)
            grads = network.backward(model, cache, grad_y)
            return value, [grads[n] for n in names]

        def kinks(_params):
            signs = [relu_signs(model, x)]
            if loss_cfg.mode is LossMode.PERCEPTUAL_ONLY or (
                loss_cfg.mode is LossMode.COMPOUND and loss_cfg.w_p != 0
            ):
                y = predict(model, x)
                signs.append(extractor_relu_signs(extractor, y, max(loss_cfg.stages_used)))
            return np.concatenate(signs)

        errors = finite_diff_errors(loss_fn, params, eps, samples, cfg.seed, kinks)
        report += [(label, name, err) for name, err in zip(names, errors)]
    return report


def cmd_gradcheck(config: Config, container: Container) -> int:
    cfg = _train_config(config)
    started = time.perf_counter()
    extractor = container.extractor(cfg.extractor)
    report = gradient_report(cfg, extractor, config.eps, config.samples or None)
    worst = max(err for _, _, err in report)
    passed = worst < GRADCHECK_TOLERANCE

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gradcheck.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["loss_mode", "group", "max_relative_error", "passed"])
        for label, name, err in report:
            writer.writerow([label, name, f"{err:.6e}", err < GRADCHECK_TOLERANCE])
    for label, name, err in report:
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        logging.info(f"{label:<26} {name:<22} {err:.3e} {status}")
    logging.info(
        f"Gradient check {'passed' if passed else 'FAILED'}: max relative error {worst:.3e} "
        f"over {len(report)} checks ({time.perf_counter() - started:.1f}s)"
    )

    manifest = _manifest(
        config,
        cfg,
        outputs=[str(out / "gradcheck.csv")],
        extra={"eps": config.eps, "samples": config.samples, "max_relative_error": worst, "passed": passed},
    )
    write_manifest(manifest.finish(), manifest_path_for(out))
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_ablate(config: Config, container: Container) -> int:
    cfg = _train_config(config)
    train_set, test_set = load_dataset(config.data_dir)
    if test_set is None:
        raise DatasetError(f"{config.data_dir} has no test split to compare variants on")
    results = ablation_study(train_set, test_set, cfg, config.seeds)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "seed", "psnr", "ssim", "rmse"])
        for r in results:
            writer.writerow([r.variant, r.seed, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.rmse:.6f}"])

    lines = []
    summary = {}
    for variant in dict.fromkeys(r.variant for r in results):
        runs = [r for r in results if r.variant == variant]
        summary[variant] = {m: summarize([getattr(r, m) for r in runs]) for m in ("psnr", "ssim", "rmse")}
        stats = summary[variant]
        lines.append(
            f"{variant:<10} PSNR {stats['psnr'][0]:.4f} ± {stats['psnr'][1]:.4f}  "
            f"SSIM {stats['ssim'][0]:.4f} ± {stats['ssim'][1]:.4f}  "
            f"RMSE {stats['rmse'][0]:.6f} ± {stats['rmse'][1]:.6f}"
        )
    table = "\n".join(lines)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    logging.info(f"Ablation over seeds {list(config.seeds)}:\n{table}")

    manifest = _manifest(
        config,
        cfg,
        inputs=[str(config.data_dir)],
        outputs=[str(out / "ablation.csv"), str(out / "report.txt")],
        extra={"seeds": list(config.seeds), "summary": {v: {m: list(s) for m, s in st.items()} for v, st in summary.items()}},
    )
    write_manifest(manifest.finish(), manifest_path_for(out))
    return EXIT_OK


def cmd_export_extractor(config: Config, container: Container) -> int:
    cfg = load_config_file(config.config_path)
    seed = config.seed if config.seed is not None else cfg.extractor.seed
    extractor = seeded_extractor(cfg.extractor.stage_channels, seed)
    out = Path(config.out_path)
    save_extractor(extractor, out)
    logging.info(f"Wrote frozen extractor (seed {seed}) to {out}")
    manifest = _manifest(config, cfg, outputs=[str(out)], extra={"extractor_seed": seed})
    write_manifest(manifest.finish(), manifest_path_for(out))
    return EXIT_OK


def cmd_replay(config: Config, container: Container) -> int:
    manifest = read_manifest(config.manifest)
    if manifest.command == "replay":
        raise ConfigError(f"{config.manifest}: refusing to replay a replay")
    logging.info(f"Replaying: edcnn {' '.join(manifest.argv)}")
    return run(Config.from_cli(manifest.argv), container)


COMMANDS: Dict[str, CommandFn] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-extractor": cmd_export_extractor,
    "replay": cmd_replay,
}


def run(config: Config, container: Optional[Container] = None) -> int:
    """Runs one command and maps its failure to an exit code."""
    container = container or Container()
    try:
        return COMMANDS[config.command](config, container)
    except (
        ConfigError,
        DatasetError,
        ShapeMismatchError,
        TrainingError,
        NonFiniteError,
        StaleCacheError,
    ) as e:
        logging.error(str(e))
        return EXIT_FAILURE
    except (CheckpointError, ImageFormatError, OSError) as e:
        logging.error(str(e))
        return EXIT_IO
    except Exception as e:
        logging.error(f"Unexpected error: {e}")
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> None:
    config = Config.from_cli(argv)
    setup_logging(config.log_file, config.verbose)

    def shutdown_handler(signum: int, frame) -> None:
        logging.info("Shutting down gracefully...")
        sys.exit(0)

    signal.signal(signal.SIGINT, shutdown_handler)

    if sys.platform == "win32":
        try:
            signal.signal(signal.SIGBREAK, shutdown_handler)
        except ValueError:
            pass

    sys.exit(run(config))


if __name__ == "__main__":
    main()

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import save_checkpoint
from .data import read_pair, sample_patches
from .errors import DatasetError, NonFiniteError, TrainingError
from .losses import FrozenExtractor, build_extractor, compound_loss
from .metrics import psnr, rmse, ssim
from .models import EpochRecord, ModelConfig, PairedDataset, TrainConfig
from .network import Model, backward, forward, init_model
from .optim import AdamWState, adamw_step

LOG_COLUMNS = ("epoch", "mean_train_loss", "mean_test_psnr", "mean_test_ssim", "wall_seconds")

ImagePairArrays = Tuple[np.ndarray, np.ndarray]


@dataclass
class TrainingLog:
    """Per-epoch records, appended to a CSV file as they are produced."""

    path: Optional[Path] = None
    records: List[EpochRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            with open(self.path, "w", encoding="utf-8", newline="\n") as f:
                f.write(",".join(LOG_COLUMNS) + "\n")

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(
                    f"{record.epoch},{record.mean_train_loss:.6f},"
                    f"{record.mean_test_psnr:.6f},{record.mean_test_ssim:.6f},"
                    f"{record.wall_seconds:.6f}\n"
                )


def load_images(dataset: Optional[PairedDataset]) -> List[ImagePairArrays]:
    if dataset is None:
        return []
    return [read_pair(pair) for pair in dataset.pairs]


def denoise_image(model: Model, image: np.ndarray) -> np.ndarray:
    """Full-size inference, clamped to the valid intensity range."""
    return np.clip(model.denoise(image), 0.0, 1.0)


def evaluate_images(
    model: Model, images: Sequence[ImagePairArrays]
) -> Dict[str, List[float]]:
    scores: Dict[str, List[float]] = {"psnr": [], "ssim": [], "rmse": []}
    for low, high in images:
        denoised = denoise_image(model, low)
        scores["psnr"].append(psnr(denoised, high))
        scores["ssim"].append(ssim(denoised, high))
        scores["rmse"].append(rmse(denoised, high))
    return scores


def _batch(
    images: Sequence[ImagePairArrays],
    indices: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ImagePairArrays:
    parts = [
        sample_patches(images[i], cfg.patches_per_image, cfg.patch_size, rng) for i in indices
    ]
    return (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
    )


def train(
    model: Model,
    dataset: PairedDataset,
    cfg: TrainConfig,
    test: Optional[PairedDataset] = None,
    extractor: Optional[FrozenExtractor] = None,
    out_dir: Optional[Path] = None,
) -> Tuple[Model, TrainingLog]:
    """Runs ``cfg.epochs`` epochs of patch-based AdamW training, in place on ``model``.

    Each epoch shuffles the images, then every batch takes ``images_per_batch``
    images and crops ``patches_per_image`` fresh patches from each. Images left
    over after the last full batch are skipped for that epoch.
    """
    cfg.validate()
    if len(dataset) < cfg.images_per_batch:
        raise DatasetError(
            f"training split has {len(dataset)} images, fewer than one batch of {cfg.images_per_batch}"
        )
    images = load_images(dataset)
    test_images = load_images(test)
    if extractor is None and cfg.loss.needs_extractor:
        extractor = build_extractor(cfg.extractor)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out_dir / "training_log.csv" if out_dir else None)
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    n_batches = len(images) // cfg.images_per_batch
    logging.info(
        f"Training {model.config.variant} on {len(images)} images: {n_batches} batches of "
        f"{cfg.patches_per_batch} patches per epoch, loss {cfg.loss.mode.value}"
    )

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(images))
        losses = []
        for b in range(n_batches):
            indices = order[b * cfg.images_per_batch : (b + 1) * cfg.images_per_batch]
            inputs, targets = _batch(images, indices, cfg, rng)
            y, cache = forward(model, inputs)
            value, grad_y = compound_loss(cfg.loss, extractor, y, targets)
            if not math.isfinite(value):
                raise TrainingError(f"epoch {epoch}, batch {b}: loss is {value}")
            grads = backward(model, cache, grad_y)
            try:
                adamw_step(model.params, grads, state, cfg.learning_rate)
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch}, batch {b}: {e}") from e
            losses.append(value)

        mean_loss = float(np.mean(losses))
        if test_images:
            scores = evaluate_images(model, test_images)
            test_psnr = float(np.mean(scores["psnr"]))
            test_ssim = float(np.mean(scores["ssim"]))
        else:
            test_psnr = test_ssim = math.nan
        elapsed = time.perf_counter() - started
        log.append(
            EpochRecord(
                epoch=epoch,
                mean_train_loss=mean_loss,
                mean_test_psnr=test_psnr,
                mean_test_ssim=test_ssim,
                wall_seconds=elapsed if cfg.log_wall_time else 0.0,
            )
        )
        logging.info(
            f"Epoch {epoch}/{cfg.epochs}: loss {mean_loss:.6f}, "
            f"test PSNR {test_psnr:.4f} dB, SSIM {test_ssim:.4f} ({elapsed:.1f}s)"
        )
        if model.bank is not None:
            logging.debug(f"Sobel factors: {np.array2string(model.bank.factors, precision=4)}")

        if out_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch{epoch:04d}.edc")

    if out_dir:
        save_checkpoint(model, out_dir / "final.edc")
    return model, log


ABLATION_VARIANTS = ("BCNN", "BCNN+DC", "EDCNN")


@dataclass
class AblationResult:
    variant: str
    seed: int
    psnr: float
    ssim: float
    rmse: float


def ablation_study(
    dataset: PairedDataset,
    test: PairedDataset,
    cfg: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = ABLATION_VARIANTS,
) -> List[AblationResult]:
    """Trains every variant once per seed with otherwise identical settings."""
    test_images = load_images(test)
    extractor = build_extractor(cfg.extractor) if cfg.loss.needs_extractor else None
    results = []
    for variant in variants:
        for seed in seeds:
            flags = ModelConfig.for_variant(variant)
            model_cfg = replace(
                cfg.model,
                use_edge_module=flags.use_edge_module,
                use_dense_connections=flags.use_dense_connections,
                seed=seed,
            )
            run_cfg = replace(cfg, seed=seed, model=model_cfg)
            model, _ = train(init_model(model_cfg), dataset, run_cfg, extractor=extractor)
            scores = evaluate_images(model, test_images)
            result = AblationResult(
                variant,
                seed,
                float(np.mean(scores["psnr"])),
                float(np.mean(scores["ssim"])),
                float(np.mean(scores["rmse"])),
            )
            logging.info(
                f"Ablation {variant} seed {seed}: PSNR {result.psnr:.4f} dB, "
                f"SSIM {result.ssim:.4f}, RMSE {result.rmse:.6f}"
            )
            results.append(result)
    return results

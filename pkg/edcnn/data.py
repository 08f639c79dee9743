"""Synthetic phantoms, low-dose simulation, 16-bit PGM files and paired datasets.

Dataset layout: ``<split>/low/NNNN.pgm`` paired with ``<split>/high/NNNN.pgm`` by
file name. A data directory either holds ``train/`` (and optionally ``test/``)
split directories or is itself a single split.
"""

import logging
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DatasetError, ImageFormatError
from .models import ImagePair, PairedDataset

Seed = Union[int, Sequence[int]]
PathLike = Union[str, Path]

MIN_PHANTOM_SIZE = 64
NOISE_SIGMA0 = 0.05
MAXVAL = 65535
TEST_SEED_OFFSET = 1_000_000

_PGM_HEADER_RE = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def generate_phantom(seed: Seed, h: int = 64, w: int = 64) -> np.ndarray:
    """Seeded ellipse phantom on a soft background disc, values in [0, 1], shape (1, 1, h, w)."""
    if h < MIN_PHANTOM_SIZE or w < MIN_PHANTOM_SIZE:
        raise DatasetError(
            f"phantoms must be at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE}, got {h}x{w}"
        )
    rng = np.random.default_rng(seed)
    y = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    x = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    yy, xx = np.meshgrid(y, x, indexing="ij")

    radius = rng.uniform(0.8, 0.95)
    softness = rng.uniform(0.02, 0.05)
    body = rng.uniform(0.25, 0.45)
    r = np.sqrt(xx * xx + yy * yy) / radius
    img = body / (1.0 + np.exp((r - 1.0) / softness))

    for _ in range(rng.integers(5, 13)):
        cy, cx = rng.uniform(-0.55, 0.55, size=2)
        ay, ax = rng.uniform(0.05, 0.35, size=2)
        theta = rng.uniform(0.0, np.pi)
        intensity = rng.uniform(-0.2, 0.5)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        img = img + intensity * ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0)

    return np.clip(img, 0.0, 1.0).astype(np.float32)[None, None]


def simulate_low_dose(clean: np.ndarray, dose_factor: float, seed: Seed) -> np.ndarray:
    """Signal-dependent Gaussian noise, std sigma0 * sqrt((1/dose - 1) * (clean + 0.1))."""
    if not 0.0 < dose_factor <= 1.0:
        raise ValueError(f"dose_factor must be in (0, 1], got {dose_factor}")
    if dose_factor == 1.0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    clean64 = clean.astype(np.float64)
    sigma = NOISE_SIGMA0 * np.sqrt((1.0 / dose_factor - 1.0) * (clean64 + 0.1))
    noisy = clean64 + sigma * rng.standard_normal(clean.shape)
    return np.clip(noisy, 0.0, 1.0).astype(clean.dtype)


def read_pgm(path: PathLike) -> np.ndarray:
    """Binary PGM (P5) as a (1, 1, h, w) float32 image normalized by maxval."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    for _ in range(4):
        match = _PGM_HEADER_RE.match(data, pos)
        if match is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        fields.append(match.group(1))
        pos = match.end()
    if fields[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        raise ImageFormatError(f"{path}: malformed PGM header: {e}") from e
    if w < 1 or h < 1 or not 0 < maxval <= MAXVAL:
        raise ImageFormatError(f"{path}: invalid PGM header {w}x{h} maxval {maxval}")

    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = w * h * dtype.itemsize
    raster = data[pos : pos + size]
    if len(raster) != size:
        raise ImageFormatError(f"{path}: expected {size} raster bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return (pixels.astype(np.float64) / maxval).astype(np.float32)[None, None]


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 16-bit levels, rounding half to even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * MAXVAL).astype(
        ">u2"
    )


def write_pgm(path: PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 4:
        if img.shape[:2] != (1, 1):
            raise ImageFormatError(f"can only write one single-channel image, got {img.shape}")
        img = img[0, 0]
    if img.ndim != 2:
        raise ImageFormatError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        f.write(quantize(img).tobytes())


def load_pairs(split_dir: PathLike, split: str = "train") -> PairedDataset:
    split_dir = Path(split_dir)
    low_dir, high_dir = split_dir / "low", split_dir / "high"
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise DatasetError(f"missing dataset directory: {d}")
    low = {p.name for p in low_dir.glob("*.pgm")}
    high = {p.name for p in high_dir.glob("*.pgm")}
    if low != high:
        unpaired = sorted(low ^ high)
        raise DatasetError(f"{split_dir}: unpaired files {unpaired[:5]}")
    if not low:
        raise DatasetError(f"{split_dir}: no .pgm pairs found")
    pairs = [ImagePair(name, low_dir / name, high_dir / name) for name in sorted(low)]
    return PairedDataset(pairs, split)


def load_dataset(data_dir: PathLike) -> Tuple[PairedDataset, Optional[PairedDataset]]:
    """(train, test) splits; test is None when the directory has no test split."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DatasetError(f"data directory does not exist: {data_dir}")
    if (data_dir / "train").is_dir():
        train = load_pairs(data_dir / "train", "train")
        test = load_pairs(data_dir / "test", "test") if (data_dir / "test").is_dir() else None
    else:
        train, test = load_pairs(data_dir, "train"), None
    logging.info(
        f"Loaded {len(train)} training pairs"
        + (f" and {len(test)} test pairs" if test else "")
        + f" from {data_dir}"
    )
    return train, test


def read_pair(pair: ImagePair) -> Tuple[np.ndarray, np.ndarray]:
    low, high = read_pgm(pair.low), read_pgm(pair.high)
    if low.shape != high.shape:
        raise DatasetError(
            f"{pair.name}: low-dose {low.shape[2:]} and normal-dose {high.shape[2:]} differ"
        )
    return low, high


def sample_patches(
    pair: Tuple[np.ndarray, np.ndarray],
    n_patches: int,
    patch_size: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Crops the same ``n_patches`` random windows from both images of a pair."""
    low, high = pair
    h, w = low.shape[-2:]
    if h < patch_size or w < patch_size:
        raise DatasetError(f"image {h}x{w} is smaller than patch size {patch_size}")
    tops = rng.integers(0, h - patch_size + 1, size=n_patches)
    lefts = rng.integers(0, w - patch_size + 1, size=n_patches)
    low2d, high2d = low.reshape(h, w), high.reshape(h, w)
    inputs = np.stack(
        [low2d[t : t + patch_size, l : l + patch_size] for t, l in zip(tops, lefts)]
    )
    targets = np.stack(
        [high2d[t : t + patch_size, l : l + patch_size] for t, l in zip(tops, lefts)]
    )
    return inputs[:, None], targets[:, None]


def write_synthetic_split(
    split_dir: PathLike, count: int, size: int, dose_factor: float, seed: int, offset: int = 0
) -> List[Path]:
    """Writes ``count`` phantom pairs; image i uses phantom seed (seed, offset + i)."""
    split_dir = Path(split_dir)
    (split_dir / "low").mkdir(parents=True, exist_ok=True)
    (split_dir / "high").mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(count):
        clean = generate_phantom([seed, offset + i], size, size)
        noisy = simulate_low_dose(clean, dose_factor, [seed, offset + i, 1])
        name = f"{i:04d}.pgm"
        write_pgm(split_dir / "high" / name, clean)
        write_pgm(split_dir / "low" / name, noisy)
        written += [split_dir / "low" / name, split_dir / "high" / name]
    logging.info(f"Wrote {count} synthetic pairs ({size}x{size}, dose {dose_factor}) to {split_dir}")
    return written

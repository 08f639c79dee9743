"""Paired-image quality metrics on images normalized to [0, 1]."""

import math

import numpy as np
from skimage.metrics import structural_similarity

from .errors import ShapeMismatchError
from .losses import FrozenExtractor, extractor_forward, mse_loss

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"metric: shapes {a.shape} and {b.shape} differ")


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    mse = _mse(a, b)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    return math.sqrt(_mse(a, b))


def _image_stack(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 4 and x.shape[1] == 1:
        return x[:, 0]
    raise ShapeMismatchError(
        f"ssim: expected a single-channel (h, w) or (n, 1, h, w) image, got {x.shape}"
    )


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    # truncate 3.5 at sigma 1.5 gives the 11x11 window; the border crop keeps valid windows only
    return float(
        structural_similarity(
            a,
            b,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=DYNAMIC_RANGE,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5); batch-averaged."""
    _check_pair(a, b)
    sa, sb = _image_stack(a), _image_stack(b)
    if sa.shape[1] < SSIM_WINDOW or sa.shape[2] < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"ssim: image {sa.shape[1:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    return float(np.mean([_ssim_single(x, y) for x, y in zip(sa, sb)]))


def feature_distance(ext: FrozenExtractor, a: np.ndarray, b: np.ndarray) -> float:
    """MSE between the deepest extractor stage features of two images."""
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None, None], b[None, None]
    return mse_loss(extractor_forward(ext, a)[-1], extractor_forward(ext, b)[-1])[0]

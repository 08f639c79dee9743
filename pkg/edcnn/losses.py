"""Training losses: pixel MSE, multi-scale perceptual loss over a frozen extractor, and
their weighted sum.

The extractor has four stages; each halves both spatial dimensions with a stride-2
3x3 conv followed by a stride-1 3x3 conv, ReLU after both. Its weights are seeded
(or loaded from an "EDX1" file) and stored read-only. Inputs are reflect-padded on
the bottom/right up to the next multiple of 16 so every stage size is an integer.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .checkpoint import (
    EXTRACTOR_MAGIC,
    ContainerHeader,
    read_container,
    validate_shapes,
    write_container,
)
from .errors import CheckpointShapeError, ConfigError, ShapeMismatchError
from .models import ExtractorConfig, LossConfig, LossMode
from .tensor import DTYPE, ConvSpec, conv2d_backward, conv2d_forward, relu, relu_backward

N_STAGES = 4
PAD_MULTIPLE = 2**N_STAGES
MIN_SIZE = 16


def extractor_shapes(stage_channels: Sequence[int]) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    in_ch = 1
    for s, ch in enumerate(stage_channels, start=1):
        shapes[f"stage{s}.conv_down"] = (ch, in_ch, 3, 3)
        shapes[f"stage{s}.conv_down.bias"] = (ch,)
        shapes[f"stage{s}.conv"] = (ch, ch, 3, 3)
        shapes[f"stage{s}.conv.bias"] = (ch,)
        in_ch = ch
    return shapes


@dataclass(frozen=True)
class FrozenExtractor:
    stage_channels: Tuple[int, ...]
    params: Dict[str, np.ndarray] = field(repr=False)
    source: str = "seeded"

    def __post_init__(self):
        for p in self.params.values():
            p.setflags(write=False)

    def stage_specs(self, s: int) -> Tuple[ConvSpec, ConvSpec]:
        p = self.params
        return (
            ConvSpec(p[f"stage{s}.conv_down"], p[f"stage{s}.conv_down.bias"], stride=2, padding=1),
            ConvSpec(p[f"stage{s}.conv"], p[f"stage{s}.conv.bias"], stride=1, padding=1),
        )

    def astype(self, dtype) -> "FrozenExtractor":
        return FrozenExtractor(
            self.stage_channels,
            {name: p.astype(dtype) for name, p in self.params.items()},
            self.source,
        )


def seeded_extractor(
    stage_channels: Sequence[int] = (16, 32, 64, 128), seed: int = 0
) -> FrozenExtractor:
    """Fan-in uniform kernels, zero biases; identical seed gives identical weights."""
    if len(stage_channels) != N_STAGES:
        raise ConfigError(f"extractor needs {N_STAGES} stages, got {len(stage_channels)}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in extractor_shapes(stage_channels).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            bound = np.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return FrozenExtractor(tuple(stage_channels), params, "seeded")


def save_extractor(ext: FrozenExtractor, path: Union[str, Path]) -> None:
    header = ContainerHeader(N_STAGES, ext.stage_channels[0], 0, 0)
    write_container(path, EXTRACTOR_MAGIC, header, ext.params)


def load_extractor(path: Union[str, Path]) -> FrozenExtractor:
    header, tensors = read_container(path, EXTRACTOR_MAGIC)
    if header.a != N_STAGES:
        raise CheckpointShapeError(f"{path}: expected {N_STAGES} stages, got {header.a}")
    try:
        channels = tuple(
            tensors[f"stage{s}.conv_down"].shape[0] for s in range(1, N_STAGES + 1)
        )
    except KeyError as e:
        raise CheckpointShapeError(f"{path}: missing extractor tensor {e}") from e
    validate_shapes(tensors, extractor_shapes(channels), str(path))
    logging.info(f"Loaded frozen extractor from {path} (stage channels {channels})")
    return FrozenExtractor(channels, dict(tensors), "file")


def build_extractor(cfg: ExtractorConfig) -> FrozenExtractor:
    if cfg.path:
        return load_extractor(cfg.path)
    return seeded_extractor(cfg.stage_channels, cfg.seed)


def _reflect_indices(size: int) -> np.ndarray:
    target = -(-size // PAD_MULTIPLE) * PAD_MULTIPLE
    idx = np.arange(target)
    over = idx >= size
    idx[over] = 2 * (size - 1) - idx[over]
    return idx


def reflect_pad(x: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    rows, cols = _reflect_indices(x.shape[2]), _reflect_indices(x.shape[3])
    return np.ascontiguousarray(x[:, :, rows[:, None], cols[None, :]]), (rows, cols)


def reflect_pad_backward(
    grad: np.ndarray, index: Tuple[np.ndarray, np.ndarray], shape: Tuple[int, ...]
) -> np.ndarray:
    rows, cols = index
    out = np.zeros(shape, dtype=grad.dtype)
    np.add.at(out, (slice(None), slice(None), rows[:, None], cols[None, :]), grad)
    return out


@dataclass
class _ExtractorCache:
    index: Tuple[np.ndarray, np.ndarray]
    shape: Tuple[int, ...]
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_down: List[np.ndarray] = field(default_factory=list)
    pre_conv: List[np.ndarray] = field(default_factory=list)


def _check_extractor_input(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatchError(f"channels: extractor expects (n, 1, h, w), got {x.shape}")
    if x.shape[2] < MIN_SIZE or x.shape[3] < MIN_SIZE:
        raise ShapeMismatchError(
            f"spatial: extractor needs at least {MIN_SIZE}x{MIN_SIZE}, got {x.shape[2:]}"
        )


def _forward_cached(
    ext: FrozenExtractor, x: np.ndarray, n_stages: int = N_STAGES
) -> Tuple[List[np.ndarray], _ExtractorCache]:
    _check_extractor_input(x)
    h, index = reflect_pad(x)
    cache = _ExtractorCache(index=index, shape=x.shape)
    feats = []
    for s in range(1, n_stages + 1):
        down, conv = ext.stage_specs(s)
        cache.inputs.append(h)
        z_down = conv2d_forward(h, down)
        z_conv = conv2d_forward(relu(z_down), conv)
        cache.pre_down.append(z_down)
        cache.pre_conv.append(z_conv)
        h = relu(z_conv)
        feats.append(h)
    return feats, cache


def _backward_input(
    ext: FrozenExtractor, cache: _ExtractorCache, stage_grads: Dict[int, np.ndarray]
) -> np.ndarray:
    """Gradient with respect to the (unpadded) input; weights get none."""
    grad = None
    for s in range(len(cache.inputs), 0, -1):
        if s in stage_grads:
            grad = stage_grads[s] if grad is None else grad + stage_grads[s]
        if grad is None:
            continue
        down, conv = ext.stage_specs(s)
        z_down, z_conv = cache.pre_down[s - 1], cache.pre_conv[s - 1]
        grad_a, _, _ = conv2d_backward(relu(z_down), conv, relu_backward(z_conv, grad))
        grad, _, _ = conv2d_backward(cache.inputs[s - 1], down, relu_backward(z_down, grad_a))
    return reflect_pad_backward(grad, cache.index, cache.shape)


def extractor_forward(ext: FrozenExtractor, x: np.ndarray) -> List[np.ndarray]:
    """Stage outputs; stage s has shape (n, channels_s, H/2^s, W/2^s) of the padded input."""
    feats, _ = _forward_cached(ext, x)
    return feats


def extractor_relu_signs(ext: FrozenExtractor, x: np.ndarray, n_stages: int = N_STAGES) -> np.ndarray:
    _, cache = _forward_cached(ext, x, n_stages)
    return np.concatenate([z.ravel() > 0 for z in cache.pre_down + cache.pre_conv])


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    value = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (2.0 / diff.size) * diff
    return value, grad.astype(pred.dtype, copy=False)


def ms_perceptual_loss(
    ext: FrozenExtractor,
    pred: np.ndarray,
    target: np.ndarray,
    stages_used: Sequence[int] = (1, 2, 3, 4),
) -> Tuple[float, np.ndarray]:
    """Mean over the selected stages of the per-stage feature MSE."""
    stages = sorted(set(stages_used))
    if not stages:
        raise ConfigError("stages_used must not be empty")
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"perceptual: shapes {pred.shape} and {target.shape} differ"
        )
    deepest = stages[-1]
    feats_pred, cache = _forward_cached(ext, pred, deepest)
    feats_target, _ = _forward_cached(ext, target, deepest)

    value = 0.0
    stage_grads = {}
    for s in stages:
        v, g = mse_loss(feats_pred[s - 1], feats_target[s - 1])
        value += v / len(stages)
        stage_grads[s] = g / len(stages)
    grad = _backward_input(ext, cache, stage_grads)
    return value, grad.astype(pred.dtype, copy=False)


def compound_loss(
    cfg: LossConfig, ext: FrozenExtractor, pred: np.ndarray, target: np.ndarray
) -> Tuple[float, np.ndarray]:
    """MSE + w_p * multi-scale perceptual, or either term alone per ``cfg.mode``."""
    if cfg.mode is LossMode.PERCEPTUAL_ONLY:
        return ms_perceptual_loss(ext, pred, target, cfg.stages_used)
    mse_value, mse_grad = mse_loss(pred, target)
    if cfg.mode is LossMode.MSE_ONLY or cfg.w_p == 0:
        return mse_value, mse_grad
    perc_value, perc_grad = ms_perceptual_loss(ext, pred, target, cfg.stages_used)
    return mse_value + cfg.w_p * perc_value, mse_grad + cfg.w_p * perc_grad

"""Dense rank-4 tensors and the differentiable primitives the network is built from.

A tensor is a C-contiguous numpy array shaped (batch, channels, height, width).
Training runs in float32; every primitive preserves the dtype of its inputs so the
same code runs in float64 for finite-difference verification.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

DTYPE = np.float32
SUPPORTED_KERNELS = (1, 3)

LossFn = Callable[[List[np.ndarray]], Tuple[float, List[np.ndarray]]]
KinkFn = Callable[[List[np.ndarray]], np.ndarray]


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Returns a contiguous rank-4 array, validating the rank."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeMismatchError(f"rank: expected 4 (n, c, h, w), got {arr.ndim}")
    return arr


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=dtype)


@dataclass(frozen=True)
class ConvSpec:
    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        return (
            (h + 2 * self.padding - kh) // self.stride + 1,
            (w + 2 * self.padding - kw) // self.stride + 1,
        )

    def validate(self) -> None:
        if self.kernel.ndim != 4:
            raise ShapeMismatchError(
                f"kernel rank: expected 4 (out, in, kh, kw), got {self.kernel.ndim}"
            )
        kh, kw = self.kernel.shape[2:]
        if kh not in SUPPORTED_KERNELS or kw not in SUPPORTED_KERNELS:
            raise ShapeMismatchError(f"kernel size: {kh}x{kw} is not 1x1 or 3x3")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeMismatchError(
                f"bias length: expected {self.out_channels}, got {self.bias.shape}"
            )
        if self.stride < 1:
            raise ShapeMismatchError(f"stride: must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeMismatchError(
                f"padding: must be non-negative, got {self.padding}"
            )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv_input(x: np.ndarray, spec: ConvSpec) -> None:
    spec.validate()
    if x.ndim != 4:
        raise ShapeMismatchError(f"rank: expected 4 (n, c, h, w), got {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(
            f"channels: input has {x.shape[1]}, kernel expects {spec.in_channels}"
        )
    kh, kw = spec.kernel.shape[2:]
    if x.shape[2] + 2 * spec.padding < kh:
        raise ShapeMismatchError(
            f"height: {x.shape[2]} with padding {spec.padding} is smaller than kernel {kh}"
        )
    if x.shape[3] + 2 * spec.padding < kw:
        raise ShapeMismatchError(
            f"width: {x.shape[3]} with padding {spec.padding} is smaller than kernel {kw}"
        )


def _shifted(xp: np.ndarray, i: int, j: int, spec: ConvSpec, oh: int, ow: int):
    """Input pixels that kernel tap (i, j) touches, one per output position."""
    s = spec.stride
    return xp[:, :, i : i + s * oh : s, j : j + s * ow : s]


def conv2d_forward(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation (no kernel flip) plus bias.

    Accumulates one kernel tap at a time in (row, col) order so the summation
    order, and therefore the result, is fixed.
    """
    _check_conv_input(x, spec)
    n, _, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    kh, kw = spec.kernel.shape[2:]
    xp = _pad(x, spec.padding)
    out = np.zeros((spec.out_channels, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(
                spec.kernel[:, :, i, j], _shifted(xp, i, j, spec, oh, ow), axes=([1], [1])
            )
    out = out.transpose(1, 0, 2, 3)
    if spec.bias is not None:
        out = out + spec.bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(
    x: np.ndarray, spec: ConvSpec, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_kernel, grad_bias)."""
    _check_conv_input(x, spec)
    n, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    expected = (n, spec.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeMismatchError(
            f"grad_out: expected shape {expected}, got {grad_out.shape}"
        )

    p, s = spec.padding, spec.stride
    kh, kw = spec.kernel.shape[2:]
    xp = _pad(x, p)
    grad_kernel = np.zeros_like(spec.kernel)
    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_kernel[:, :, i, j] = np.tensordot(
                grad_out, _shifted(xp, i, j, spec, oh, ow), axes=([0, 2, 3], [0, 2, 3])
            )
            # (o,) x (n, o, oh, ow) -> (c, n, oh, ow)
            spread = np.tensordot(spec.kernel[:, :, i, j], grad_out, axes=([0], [1]))
            grad_padded[:, :, i : i + s * oh : s, j : j + s * ow : s] += spread.transpose(
                1, 0, 2, 3
            )
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_x = grad_padded[:, :, p : p + h, p : p + w]

    return (
        np.ascontiguousarray(grad_x, dtype=x.dtype),
        grad_kernel,
        np.ascontiguousarray(grad_bias, dtype=spec.kernel.dtype),
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient 0 at x == 0."""
    if x.shape != grad_out.shape:
        raise ShapeMismatchError(
            f"grad_out: expected shape {x.shape}, got {grad_out.shape}"
        )
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeMismatchError("parts: nothing to concatenate")
    n, _, h, w = parts[0].shape
    for idx, part in enumerate(parts[1:], start=1):
        if part.shape[0] != n:
            raise ShapeMismatchError(
                f"batch: part {idx} has {part.shape[0]}, expected {n}"
            )
        if part.shape[2:] != (h, w):
            raise ShapeMismatchError(
                f"spatial: part {idx} is {part.shape[2:]}, expected {(h, w)}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def split_channels(grad_out: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    """Backward of concat_channels: per-part slices of the upstream gradient."""
    if sum(sizes) != grad_out.shape[1]:
        raise ShapeMismatchError(
            f"channels: parts sum to {sum(sizes)}, gradient has {grad_out.shape[1]}"
        )
    out = []
    start = 0
    for size in sizes:
        out.append(grad_out[:, start : start + size])
        start += size
    return out


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"add: shapes {x.shape} and {y.shape} differ")
    return x + y


def add_backward(grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out


def _relative_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def finite_diff_errors(
    loss_fn: LossFn,
    params: List[np.ndarray],
    eps: float = 1e-3,
    max_elements: Optional[int] = None,
    seed: int = 0,
    kinks: Optional[KinkFn] = None,
) -> List[float]:
    """Per-parameter maximum relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` with one gradient per parameter.
    Parameters are perturbed in place and restored. With ``max_elements`` set, a
    seeded sample of that many elements per parameter is checked instead of all.

    ``kinks(params)``, when given, returns the ReLU input signs of the current
    parameters. An element whose +eps or -eps perturbation flips any of them is
    skipped and the next sampled element is tried instead.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    value, grads = loss_fn(params)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {value}")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    base = kinks(params) if kinks is not None else None

    rng = np.random.default_rng(seed)
    errors = []
    skipped = 0
    for p, g in zip(params, analytic):
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient: expected shape {p.shape}, got {g.shape}"
            )
        if not p.flags["C_CONTIGUOUS"]:
            raise ValueError("parameters must be C-contiguous to be perturbed in place")
        flat = p.reshape(-1)
        order = np.arange(flat.size)
        wanted = flat.size
        if max_elements is not None and flat.size > max_elements:
            order = rng.permutation(flat.size)
            wanted = max_elements
        worst = 0.0
        checked = 0
        for idx in order:
            if checked == wanted:
                break
            original = flat[idx]
            flat[idx] = original + eps
            plus, _ = loss_fn(params)
            crossed = base is not None and not np.array_equal(kinks(params), base)
            flat[idx] = original - eps
            minus, _ = loss_fn(params)
            crossed = crossed or (base is not None and not np.array_equal(kinks(params), base))
            flat[idx] = original
            if crossed:
                skipped += 1
                continue
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError(f"loss is not finite near element {idx}")
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, _relative_error(float(g.reshape(-1)[idx]), numeric))
            checked += 1
        errors.append(worst)
    if skipped:
        logging.debug(f"Skipped {skipped} elements whose perturbation crossed a ReLU kink")
    return errors


def finite_diff_check(
    loss_fn: LossFn,
    params: List[np.ndarray],
    eps: float = 1e-3,
    max_elements: Optional[int] = None,
    seed: int = 0,
    kinks: Optional[KinkFn] = None,
) -> float:
    """Maximum relative error over every checked parameter element."""
    errors = finite_diff_errors(loss_fn, params, eps, max_elements, seed, kinks)
    return max(errors, default=0.0)

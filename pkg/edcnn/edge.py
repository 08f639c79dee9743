"""Trainable Sobel convolution and the edge enhancement module.

Filter ``i`` of a bank is ``factors[i] * BASE_PATTERNS[i % 4]``: the Sobel factor
scales the whole fixed pattern. The module output stacks the edge maps first and
the untouched input image as the last channel; checkpoints depend on that order.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensor import (
    ConvSpec,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    split_channels,
)

VERTICAL = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
HORIZONTAL = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
MAIN_DIAGONAL = [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]]
ANTI_DIAGONAL = [[0, -1, -2], [1, 0, -1], [2, 1, 0]]

BASE_PATTERNS = np.array(
    [VERTICAL, HORIZONTAL, MAIN_DIAGONAL, ANTI_DIAGONAL], dtype=np.float32
)

FACTORS_PARAM = "ee.factors"


@dataclass
class SobelBank:
    factors: np.ndarray

    @classmethod
    def initial(cls, n_filters: int, dtype=np.float32) -> "SobelBank":
        """Bank with every Sobel factor at 1.0, i.e. the classical patterns."""
        bank = cls(np.ones(n_filters, dtype=dtype))
        bank.validate()
        return bank

    @property
    def n_filters(self) -> int:
        return self.factors.shape[0]

    def validate(self) -> None:
        if self.factors.ndim != 1:
            raise ShapeMismatchError(
                f"factors: expected a vector, got shape {self.factors.shape}"
            )
        if self.n_filters == 0 or self.n_filters % 4 != 0:
            raise ConfigError(
                f"n_filters must be a positive multiple of 4, got {self.n_filters}"
            )

    def base_kernels(self) -> np.ndarray:
        """(n_filters, 1, 3, 3) unscaled patterns, one per filter."""
        reps = self.n_filters // 4
        return np.tile(BASE_PATTERNS, (reps, 1, 1))[:, None].astype(
            self.factors.dtype, copy=False
        )


def build_kernels(bank: SobelBank) -> np.ndarray:
    bank.validate()
    return bank.factors[:, None, None, None] * bank.base_kernels()


def _edge_spec(bank: SobelBank) -> ConvSpec:
    return ConvSpec(kernel=build_kernels(bank), bias=None, stride=1, padding=1)


def _check_input(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatchError(
            f"channels: edge module expects a 1-channel (n, 1, h, w) image, got {x.shape}"
        )
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ShapeMismatchError(
            f"spatial: edge module needs at least 3x3, got {x.shape[2:]}"
        )


def ee_forward(bank: SobelBank, x: np.ndarray) -> np.ndarray:
    """(n, 1, h, w) -> (n, n_filters + 1, h, w): edge maps, then the input."""
    _check_input(x)
    edges = conv2d_forward(x, _edge_spec(bank))
    return concat_channels([edges, x])


def ee_backward(
    bank: SobelBank, x: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_factors)."""
    _check_input(x)
    expected = (x.shape[0], bank.n_filters + 1) + x.shape[2:]
    if grad_out.shape != expected:
        raise ShapeMismatchError(
            f"grad_out: expected shape {expected}, got {grad_out.shape}"
        )
    grad_edges, grad_identity = split_channels(grad_out, [bank.n_filters, 1])
    grad_x, grad_kernel, _ = conv2d_backward(
        x, _edge_spec(bank), np.ascontiguousarray(grad_edges)
    )
    # d kernel_i / d factor_i is the base pattern itself
    grad_factors = (grad_kernel * bank.base_kernels()).sum(axis=(1, 2, 3))
    return grad_x + grad_identity, grad_factors.astype(bank.factors.dtype, copy=False)

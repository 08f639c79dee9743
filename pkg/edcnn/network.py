"""EDCNN: edge enhancement module, densely connected conv blocks, global residual.

Parameters live in an ordered name -> array mapping::

    ee.factors                       (sobel_filters,)        edge module only
    block{k}.conv1x1 / .bias         (filters, in_k, 1, 1)
    block{k}.conv3x3 / .bias         (filters, filters, 3, 3), 1 filter in the last block

Block ``k > 0`` reads ``concat(previous block output, edge module output)`` when
dense connections are on, otherwise just the previous output. Every conv is
followed by ReLU except the last block's 3x3, whose output is added to the input.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .edge import FACTORS_PARAM, SobelBank, ee_backward, ee_forward
from .errors import ShapeMismatchError, StaleCacheError
from .models import ModelConfig
from .tensor import (
    DTYPE,
    ConvSpec,
    add,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
    split_channels,
)

Params = Dict[str, np.ndarray]


def block_names(k: int) -> Tuple[str, str, str, str]:
    prefix = f"block{k}"
    return (
        f"{prefix}.conv1x1",
        f"{prefix}.conv1x1.bias",
        f"{prefix}.conv3x3",
        f"{prefix}.conv3x3.bias",
    )


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in checkpoint order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    if config.use_edge_module:
        shapes[FACTORS_PARAM] = (config.sobel_filters,)
    f = config.block_filters
    for k in range(config.n_blocks):
        w1, b1, w3, b3 = block_names(k)
        out3 = 1 if k == config.n_blocks - 1 else f
        shapes[w1] = (f, config.block_in_channels(k), 1, 1)
        shapes[b1] = (f,)
        shapes[w3] = (out3, f, 3, 3)
        shapes[b3] = (out3,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: Params

    @property
    def bank(self) -> Optional[SobelBank]:
        if not self.config.use_edge_module:
            return None
        return SobelBank(self.params[FACTORS_PARAM])

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter converted (float64 for gradient checks)."""
        return Model(
            self.config,
            {name: np.array(p, dtype=dtype, copy=True) for name, p in self.params.items()},
        )

    def denoise(self, image: np.ndarray) -> np.ndarray:
        return predict(self, image)


@dataclass
class ForwardCache:
    """Everything backward needs; single use."""

    config: ModelConfig
    owner: int
    x: np.ndarray
    e: np.ndarray
    pre1: List[np.ndarray] = field(default_factory=list)
    pre3: List[np.ndarray] = field(default_factory=list)
    consumed: bool = False


def init_model(config: ModelConfig) -> Model:
    """Sobel factors at 1.0, kernels uniform on [-sqrt(1/fan_in), sqrt(1/fan_in)], zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name == FACTORS_PARAM:
            params[name] = np.ones(shape, dtype=DTYPE)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return Model(config, params)


def num_params(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


def _specs(model: Model, k: int) -> Tuple[ConvSpec, ConvSpec]:
    w1, b1, w3, b3 = block_names(k)
    p = model.params
    return (
        ConvSpec(p[w1], p[b1], stride=1, padding=0),
        ConvSpec(p[w3], p[b3], stride=1, padding=1),
    )


def _check_input(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatchError(
            f"channels: model expects (n, 1, h, w) input, got {x.shape}"
        )
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ShapeMismatchError(f"spatial: input must be at least 3x3, got {x.shape[2:]}")


def _run(model: Model, x: np.ndarray, cache: Optional[ForwardCache]) -> np.ndarray:
    cfg = model.config
    e = cache.e if cache is not None else _edge_input(model, x)

    out = None
    last = cfg.n_blocks - 1
    for k in range(cfg.n_blocks):
        if k == 0:
            inp = e
        elif cfg.use_dense_connections:
            inp = concat_channels([out, e])
        else:
            inp = out
        spec1, spec3 = _specs(model, k)
        z1 = conv2d_forward(inp, spec1)
        z3 = conv2d_forward(relu(z1), spec3)
        if cache is not None:
            cache.pre1.append(z1)
            cache.pre3.append(z3)
        out = z3 if k == last else relu(z3)

    return add(out, x)


def _edge_input(model: Model, x: np.ndarray) -> np.ndarray:
    bank = model.bank
    return ee_forward(bank, x) if bank is not None else x


def forward(model: Model, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    _check_input(x)
    cache = ForwardCache(config=model.config, owner=id(model.params), x=x, e=_edge_input(model, x))
    return _run(model, x, cache), cache


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping anything for backward."""
    _check_input(x)
    return _run(model, x, None)


def relu_signs(model: Model, x: np.ndarray) -> np.ndarray:
    """Flattened ``> 0`` pattern of every ReLU input in the network for ``x``."""
    _, cache = forward(model, x)
    rectified = cache.pre1 + cache.pre3[:-1]
    return np.concatenate([z.ravel() > 0 for z in rectified])


def backward_with_input(
    model: Model, cache: ForwardCache, grad_y: np.ndarray
) -> Tuple[Params, np.ndarray]:
    """Parameter gradients plus the gradient with respect to the input image."""
    if cache.consumed:
        raise StaleCacheError("forward cache was already used by a backward pass")
    if cache.config != model.config or cache.owner != id(model.params):
        raise StaleCacheError("forward cache belongs to a different model")
    if grad_y.shape != cache.x.shape:
        raise ShapeMismatchError(
            f"grad_y: expected shape {cache.x.shape}, got {grad_y.shape}"
        )
    cache.consumed = True

    cfg = model.config
    grads: Params = {}
    last = cfg.n_blocks - 1
    grad_out = grad_y
    grad_e = np.zeros_like(cache.e)

    for k in range(last, -1, -1):
        w1, b1, w3, b3 = block_names(k)
        spec1, spec3 = _specs(model, k)
        z1, z3 = cache.pre1[k], cache.pre3[k]
        grad_z3 = grad_out if k == last else relu_backward(z3, grad_out)
        grad_a1, grads[w3], grads[b3] = conv2d_backward(relu(z1), spec3, grad_z3)
        grad_z1 = relu_backward(z1, grad_a1)

        if k == 0:
            inp = cache.e
        elif cfg.use_dense_connections:
            inp = concat_channels([relu(cache.pre3[k - 1]), cache.e])
        else:
            inp = relu(cache.pre3[k - 1])
        grad_inp, grads[w1], grads[b1] = conv2d_backward(inp, spec1, grad_z1)

        if k == 0:
            grad_e += grad_inp
        elif cfg.use_dense_connections:
            grad_prev, grad_e_part = split_channels(
                grad_inp, [cfg.block_filters, cache.e.shape[1]]
            )
            grad_e += grad_e_part
            grad_out = grad_prev
        else:
            grad_out = grad_inp

    # global residual: y = out + x
    grad_x = grad_y.copy()
    if model.bank is not None:
        grad_x_ee, grads[FACTORS_PARAM] = ee_backward(model.bank, cache.x, grad_e)
        grad_x += grad_x_ee
    else:
        grad_x += grad_e

    return {name: grads[name] for name in model.params}, grad_x


def backward(model: Model, cache: ForwardCache, grad_y: np.ndarray) -> Params:
    """Reverse-mode gradients for every parameter, keyed like ``model.params``."""
    grads, _ = backward_with_input(model, cache, grad_y)
    return grads

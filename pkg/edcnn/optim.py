from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

Params = Dict[str, np.ndarray]


@dataclass
class AdamWState:
    """Moment accumulators per parameter name; created lazily on the first step."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: Params = field(default_factory=dict)
    exp_avg_sq: Params = field(default_factory=dict)


def adamw_step(params: Params, grads: Params, state: AdamWState, lr: float) -> None:
    """One AdamW update applied in place to ``params``.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    All gradients are checked before anything is touched, so a rejected step
    leaves parameters and state unchanged.
    """
    if set(grads) != set(params):
        raise ShapeMismatchError(
            f"gradient names differ from parameters: {sorted(set(grads) ^ set(params))}"
        )
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name in state.exp_avg and state.exp_avg[name].shape != p.shape:
            raise ShapeMismatchError(
                f"{name}: optimizer state {state.exp_avg[name].shape} vs parameter {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")

    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg.setdefault(name, np.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)

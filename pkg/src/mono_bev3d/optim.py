from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeMismatch
from .nn import Tensor


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    epoch: int = 0
    # not persisted in checkpoints; a resumed run restarts from zero velocity
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(
    params: Sequence[Tuple[str, Tensor]],
    grads: Optional[Mapping[str, np.ndarray]],
    state: OptimizerState,
) -> None:
    """Heavy-ball update: v <- momentum * v - lr * g; p <- p + v.

    Gradients come from ``grads`` when given, otherwise from each tensor's
    accumulated ``grad``. Frozen tensors are left untouched.
    """
    for name, p in params:
        if p.frozen:
            continue
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            continue
        if g.shape != p.values.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.values.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        v = state.momentum * v - state.lr * g
        state.velocity[name] = v
        p.values += v


def lr_schedule(epoch: int, lr0: float = 0.01, period: int = 100) -> float:
    """Step decay: divide by 10 every ``period`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if period <= 0:
        raise ValueError(f"decay period must be positive, got {period}")
    return lr0 / (10 ** (epoch // period))

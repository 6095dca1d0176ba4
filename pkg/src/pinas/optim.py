"""SGD with momentum plus the two learning-rate schedules used here.

Update rule (per parameter, in place so external views stay valid):

    v <- momentum * v + (grad + weight_decay * w)
    w <- w - lr * v
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GuardViolation
from .tape import Tensor


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: SgdState) -> None:
    """Apply one SGD update to every parameter, reading Tensor.grad.

    Raises GuardViolation if any parameter is frozen, ContractError if a
    gradient is missing or shaped wrong. Updates are in place; grads are
    left untouched (callers zero them).
    """
    for name, t in params.items():
        if t.frozen:
            raise GuardViolation(f"sgd_step: parameter '{name}' is frozen")
        if t.grad is None:
            raise ContractError(f"sgd_step: parameter '{name}' has no gradient")
        if t.grad.shape != t.data.shape:
            raise ContractError(
                f"sgd_step: gradient shape {t.grad.shape} != parameter shape "
                f"{t.data.shape} for '{name}'"
            )
        g = t.grad
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            state.velocity[name] = v
        v *= state.momentum
        v += g
        t.data -= state.lr * v


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def step_decay_lr(
    epoch: int,
    total_epochs: int,
    base_lr: float,
    milestones: tuple[float, ...] = (0.6, 0.8),
    factor: float = 0.1,
) -> float:
    """Piecewise-constant decay: multiply by `factor` at each milestone fraction."""
    lr = base_lr
    for m in milestones:
        if epoch >= int(m * total_epochs):
            lr *= factor
    return lr

"""AdamW (decoupled weight decay), plain SGD, and the step learning-rate
schedule used by the training harness.

Parameters and gradients travel as name -> float64 array dicts matching
EncoderState.param_items(); updates happen in place and are elementwise, so
they do not depend on dict iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class AdamWState:
    """Per-parameter moment estimates plus the shared hyperparameters."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(
                f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState) -> None:
    """One AdamW update, in place.

    m and v are the usual exponential moving averages with bias correction;
    weight decay is decoupled from the gradient and scaled by lr:
    p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                         + state.weight_decay * p)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
    """Vanilla gradient descent, in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.shape}")
        p -= lr * g


@dataclass(frozen=True)
class LrSchedule:
    """Constant base rate that drops by decay_factor at decay_epoch.

    decay_epoch == total_epochs expresses "no decay".
    """

    base_lr: float
    total_epochs: int
    decay_epoch: int
    decay_factor: float = 10.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.decay_epoch <= self.total_epochs:
            raise ConfigError(
                f"decay_epoch {self.decay_epoch} outside "
                f"[0, {self.total_epochs}]")
        if self.decay_factor <= 0:
            raise ConfigError(
                f"decay_factor must be > 0, got {self.decay_factor}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ConfigError(
            f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.decay_epoch:
        return schedule.base_lr
    return schedule.base_lr / schedule.decay_factor

"""Functional optimizers.

Parameters, gradients and optimizer state are plain name -> array maps;
each step returns new maps and leaves its inputs untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import ShapeError
from .tensor import Tensor


def _array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def _check_state(params: Mapping[str, np.ndarray], slots: Mapping[str, np.ndarray], label: str) -> None:
    for name, slot in slots.items():
        if name in params and slot.shape != params[name].shape:
            raise ShapeError(f"{label} slot {name!r} has shape {slot.shape}, parameter has {params[name].shape}")


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Tensor | np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient are kept."""
    _check_state(params, state.m, "Adam m")
    _check_state(params, state.v, "Adam v")
    t = state.step + 1
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name, value in params.items():
        if name not in grads:
            continue
        g = _array(grads[name])
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


@dataclass(frozen=True)
class SGDState:
    step: int = 0
    velocity: Mapping[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Tensor | np.ndarray],
    state: SGDState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], SGDState]:
    """SGD with heavy-ball momentum and L2 weight decay."""
    _check_state(params, state.velocity, "SGD velocity")
    new_params, new_velocity = dict(params), dict(state.velocity)
    for name, value in params.items():
        if name not in grads:
            continue
        g = _array(grads[name]) + weight_decay * value
        buf = momentum * state.velocity.get(name, np.zeros_like(value)) + g
        new_params[name] = value - lr * buf
        new_velocity[name] = buf
    return new_params, SGDState(step=state.step + 1, velocity=new_velocity)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))

"""Adam with decoupled weight decay and an optional linear warmup.

Weight decay is applied to the parameters directly (never folded into the
gradient or the moment estimates), and the warmup schedule ramps the
learning rate linearly from zero over `warmup_steps`, then holds it
constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, InputError, NumericError

SCHEDULES = ("constant", "linear_warmup")


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the step schedule."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    schedule: str = "constant"
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def create_optimizer(
    params: Mapping[str, Tensor],
    learning_rate: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    warmup_steps: int = 0,
    schedule: str = "constant",
) -> OptimizerState:
    if schedule not in SCHEDULES:
        raise ConfigurationError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    if learning_rate < 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {learning_rate}")
    if schedule == "linear_warmup" and warmup_steps < 1:
        raise ConfigurationError("linear_warmup needs warmup_steps >= 1")
    state = OptimizerState(
        learning_rate=learning_rate,
        weight_decay=weight_decay,
        beta1=betas[0],
        beta2=betas[1],
        eps=eps,
        warmup_steps=warmup_steps,
        schedule=schedule,
    )
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def effective_learning_rate(state: OptimizerState, step: int | None = None) -> float:
    """Learning rate at `step` (default: the step about to be applied)."""
    t = state.step_count + 1 if step is None else step
    if state.schedule == "linear_warmup" and state.warmup_steps > 0:
        return state.learning_rate * min(1.0, t / state.warmup_steps)
    return state.learning_rate


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray] | None = None,
) -> OptimizerState:
    """Apply one update in place to every parameter tracked by `state`.

    `grads` defaults to each parameter's accumulated `.grad`. A non-finite
    gradient aborts the step before any parameter is touched.
    """
    resolved: dict[str, np.ndarray] = {}
    for name in state.m:
        if name not in params:
            raise InputError(f"optimizer state tracks {name!r} but it is missing from params")
        if grads is not None:
            if name not in grads:
                raise InputError(f"no gradient supplied for parameter {name!r}")
            g = np.asarray(grads[name])
        else:
            g = params[name].grad
            if g is None:
                g = np.zeros_like(params[name].data)
        if g.shape != params[name].data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {params[name].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
        resolved[name] = g

    state.step_count += 1
    t = state.step_count
    lr = effective_learning_rate(state, t)
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, g in resolved.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
        if state.weight_decay != 0.0:
            p.data -= (lr * state.weight_decay) * p.data
    return state

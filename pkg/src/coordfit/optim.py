"""Adam and exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NonFiniteError


@dataclass(frozen=True)
class LrSchedule:
    """Exponential decay from ``lr_start`` at iteration 0 to ``lr_end`` at ``total_iters``."""

    lr_start: float
    lr_end: float
    total_iters: int

    def __post_init__(self):
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.total_iters < 1:
            raise ContractViolation("total_iters must be >= 1")


def lr_at(schedule, iteration):
    if not 0 <= iteration <= schedule.total_iters:
        raise ContractViolation(f"iteration {iteration} outside [0, {schedule.total_iters}]")
    if iteration == schedule.total_iters:
        return float(schedule.lr_end)
    ratio = schedule.lr_end / schedule.lr_start
    return float(schedule.lr_start * ratio ** (iteration / schedule.total_iters))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list = field(default_factory=list)

    @classmethod
    def create(cls, leaves, names=None, **hyper):
        m = [np.zeros_like(leaf.data) for leaf in leaves]
        v = [np.zeros_like(leaf.data) for leaf in leaves]
        names = list(names) if names is not None else [leaf.name or f"leaf{i}"
                                                       for i, leaf in enumerate(leaves)]
        return cls(m, v, 0, names=names, **hyper)


def adam_step(state, leaves, grads, lr):
    """One bias-corrected Adam update applied in place to ``leaves``; returns them.

    ``grads`` is a list aligned with ``leaves`` or a mapping leaf -> gradient.
    """
    if isinstance(grads, dict):
        grads = [grads[leaf] for leaf in leaves]
    if len(grads) != len(leaves) or len(leaves) != len(state.m):
        raise ContractViolation("leaves, gradients and optimiser state disagree in length")
    for i, (leaf, g) in enumerate(zip(leaves, grads)):
        if g.shape != leaf.data.shape or state.m[i].shape != leaf.data.shape:
            raise ContractViolation(f"shape mismatch for {state.names[i]}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient in {state.names[i]} ({bad} entries)",
                                 name=state.names[i])
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (leaf, g) in enumerate(zip(leaves, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        leaf.data = (leaf.data - lr * update).astype(leaf.data.dtype)
    return leaves

"""Adam with per-parameter moment buffers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)  # id(param) -> first moment
    v: dict = field(default_factory=dict)  # id(param) -> second moment


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimState) -> None:
    """One bias-corrected Adam update, in place.  ``None`` grads are skipped."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.name or '?'} {p.shape}")
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, dtype=np.float32)
        kernels.adam_update(p.data, g, state.m[key], state.v[key], state.lr, state.beta1, state.beta2,
                            state.eps, bc1, bc2)


class Adam:
    """Convenience wrapper binding a parameter list to an :class:`OptimState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

"""SGD and Adam over lists of leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}; expected 'sgd' or 'adam'")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def optimizer_step(state: OptimizerState, params: list[Tensor], grads: list[np.ndarray]) -> None:
    """Apply one update in place. Gradients must align one-to-one with ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i} (shape {params[i].shape})")
    if state.kind == "adam" and not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            if g is not None:
                p.data -= p.data.dtype.type(state.lr) * g
        return
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


class Optimizer:
    """Convenience wrapper that reads ``.grad`` from the parameters it owns."""

    def __init__(self, params: list[Tensor], kind: str = "adam", lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = OptimizerState(kind, lr, **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.state, self.params, [p.grad for p in self.params])


def SGD(params, lr=0.01):
    return Optimizer(params, "sgd", lr)


def Adam(params, lr=1e-3, **kw):
    return Optimizer(params, "adam", lr, **kw)

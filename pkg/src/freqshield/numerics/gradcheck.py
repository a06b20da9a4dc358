"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
              probes: int = 20, h: float = 1e-3, floor: float = 1e-4) -> float:
    """Largest relative error between backprop and central differences.

    ``fn(*inputs)`` must return a scalar tensor. For every input that requires
    grad, ``probes`` random coordinates are perturbed by ``±h``. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(fn(*inputs).data)
            flat[idx] = orig - h
            down = float(fn(*inputs).data)
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst

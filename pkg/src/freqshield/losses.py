"""Training objectives: classifier cross-entropy and the three reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics.tensor import Tensor, apply, as_tensor, dot, mean, square

LOSS_KINDS = ("mse", "sure", "diffusion")


@dataclass(frozen=True)
class SureParams:
    sigma: float = 0.01
    tau: float = 1e-3
    probes: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"SURE sigma must be > 0, got {self.sigma}")
        if not self.tau > 0:
            raise ValueError(f"SURE tau must be > 0, got {self.tau}")
        if self.probes < 1:
            raise ValueError(f"SURE needs at least one probe, got {self.probes}")


@dataclass(frozen=True)
class ReconParams:
    sure: SureParams = SureParams()
    diffusion_weight: float = 0.1


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if t.shape != pred.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    return mean(square(pred - t))


def rademacher(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.int8) * 2 - 1


def sure_loss(operator: Callable[[Tensor], Tensor], y, params: SureParams = SureParams(),
              rng: np.random.Generator | None = None, probe: np.ndarray | None = None,
              fy: Tensor | None = None) -> Tensor:
    """Monte-Carlo SURE: ``|f(y)-y|^2/N - sigma^2 + 2 sigma^2/(N tau) * b.(f(y + tau b) - f(y))``.

    ``probe`` fixes the Rademacher vector (shape of ``y``); otherwise ``params.probes``
    vectors are drawn from ``rng`` and the divergence term is averaged over them.
    ``fy`` may pass a precomputed ``operator(y)``.
    """
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    n = y.size
    sigma2 = params.sigma ** 2
    if fy is None:
        fy = operator(Tensor(y))
    if probe is not None:
        probes = [np.asarray(probe)]
    else:
        if rng is None:
            raise ValueError("sure_loss needs either a probe or an rng")
        probes = [rademacher(y.shape, rng) for _ in range(params.probes)]
    fidelity = mean(square(fy - Tensor(y)))
    div = None
    for b in probes:
        if b.shape != y.shape:
            raise ValueError(f"probe shape {b.shape} vs input {y.shape}")
        fyp = operator(Tensor(y + params.tau * b))
        term = dot(fyp - fy, b)
        div = term if div is None else div + term
    scale = 2.0 * sigma2 / (n * params.tau * len(probes))
    return fidelity + div * scale - sigma2


def diffusion_loss(u: Tensor) -> Tensor:
    """Mean over interior pixels of the squared row and column central differences."""
    u = as_tensor(u)
    h, w = u.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"diffusion_loss needs H, W >= 3, got {h}x{w}")
    dr = (u[..., 2:, 1:-1] - u[..., :-2, 1:-1]) * 0.5
    dc = (u[..., 1:-1, 2:] - u[..., 1:-1, :-2]) * 0.5
    return mean(square(dr)) + mean(square(dc))


def composite_recon_loss(kind: str, pred: Tensor | None, target, operator=None,
                         params: ReconParams = ReconParams(), rng=None) -> Tensor:
    """Reconstruction objective of the autoencoder for ``kind`` in {mse, sure, diffusion}.

    ``diffusion`` is MSE plus ``params.diffusion_weight`` times the smoothness penalty
    of ``pred``; ``sure`` needs ``operator`` (the autoencoder) and an ``rng`` for probes.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {', '.join(LOSS_KINDS)}")
    if pred is None:
        if operator is None:
            raise ValueError("composite_recon_loss needs pred or operator")
        pred = operator(as_tensor(target))
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "diffusion":
        loss = mse_loss(pred, target)
        if params.diffusion_weight:
            loss = loss + diffusion_loss(pred) * params.diffusion_weight
        return loss
    if operator is None:
        raise ValueError("sure loss needs the operator")
    return sure_loss(operator, target, params.sure, rng=rng, fy=pred)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; ``reduction`` is ``mean``, ``sum`` or ``none`` (per sample)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} vs batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    per = -logp[np.arange(b), labels]
    probs = np.exp(logp)
    probs[np.arange(b), labels] -= 1.0

    if reduction == "none":
        return apply(per.astype(logits.data.dtype), (logits,), lambda g: (probs * g[:, None],), "cross_entropy")
    if reduction == "sum":
        return apply(np.asarray(per.sum(), dtype=logits.data.dtype), (logits,), lambda g: (probs * g,),
                     "cross_entropy")
    if reduction == "mean":
        return apply(np.asarray(per.sum() / b, dtype=logits.data.dtype), (logits,),
                     lambda g: (probs * (g / b),), "cross_entropy")
    raise ValueError(f"unknown reduction {reduction!r}")

"""Untargeted L-infinity attacks on a differentiable classifier.

Every attack works on NCHW batches in [0, 1] and returns perturbed images that
satisfy ``|x_adv - x|_inf <= eps`` and ``0 <= x_adv <= 1`` elementwise.

The iterative attacks share one engine that runs sign-gradient ascent on a
variable ``u`` living in some *domain*: the pixel domain (``u`` is the image),
or the Haar LL domain (``u`` is the LL subband and the detail bands of the clean
image are held fixed). A domain knows how to turn ``u`` into an image, how to
pull a pixel gradient back to ``u`` and how to project ``u`` onto its budget.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import rng as rngmod
from .losses import cross_entropy
from .numerics.tensor import Tensor, tsum
from .transforms import WaveletPyramid, dct2, dwt_haar, idct2, idwt_haar

ALL_KINDS = ("fgsm", "bim", "pgd", "autopgd", "dwt_fgsm", "dwt_pgd", "dwt_autopgd", "spectrum")
ITERATIVE = {"bim", "pgd", "autopgd", "dwt_pgd", "dwt_autopgd", "spectrum"}

# Auto-PGD schedule constants
APGD_P1 = 0.22
APGD_DECAY = 0.03
APGD_MIN_GAP = 0.06
APGD_RHO = 0.75
APGD_MOMENTUM = 0.75


@contextlib.contextmanager
def frozen(model):
    """Stop parameter gradients while attacking; restores the flags afterwards."""
    params = model.parameters() if hasattr(model, "parameters") else []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def loss_and_grad(model, x: np.ndarray, y: np.ndarray):
    """Per-sample cross-entropy at ``x`` and its gradient w.r.t. ``x``."""
    xt = Tensor(x, requires_grad=True)
    with frozen(model):
        per = cross_entropy(model(xt), y, reduction="none")
        tsum(per).backward()
    return per.data.astype(np.float64), xt.grad


def _project_ball(z: np.ndarray, center: np.ndarray, radius) -> np.ndarray:
    return np.minimum(np.maximum(z, center - radius), center + radius)


def within_budget(adv: np.ndarray, x: np.ndarray, eps) -> np.ndarray:
    """Pull float32 pixels that rounding left just outside the eps-ball back by one ulp."""
    adv = np.asarray(adv, dtype=np.float32)
    x32 = np.asarray(x, dtype=np.float32)
    over = np.abs(adv.astype(np.float64) - x32) > float(eps)
    if over.any():
        adv = adv.copy()
        adv[over] = np.nextafter(adv[over], x32[over])
    return adv


def project_pixels(z: np.ndarray, x: np.ndarray, eps) -> np.ndarray:
    """Clamp to the eps-ball around ``x`` and then to [0, 1], as float32."""
    return within_budget(np.clip(_project_ball(z, x, eps), 0.0, 1.0), x, eps)


class PixelDomain:
    def __init__(self, x: np.ndarray, eps: float):
        self.x = x
        self.eps = np.float32(eps)
        self.scale = 1.0

    def start(self) -> np.ndarray:
        return self.x.copy()

    def image(self, u):
        return u

    def pullback(self, g):
        return g

    def project(self, u):
        return project_pixels(u, self.x, self.eps)


class LowBandDomain:
    """Optimise only the LL subband; detail bands stay those of the clean image.

    The inverse Haar transform spreads an LL change ``d`` as ``d/2`` over its 2x2
    block, so an LL budget of ``2*eps`` maps to exactly ``eps`` in pixels. Bands
    are kept in float64 so the fixed detail bands survive the round trip.
    """

    def __init__(self, x: np.ndarray, eps: float):
        self.x = x
        self.bands = dwt_haar(np.asarray(x, dtype=np.float64))
        self.eps = 2.0 * float(np.float32(eps))
        self.scale = 2.0

    def start(self):
        return self.bands.LL.copy()

    def reconstruct(self, ll):
        return idwt_haar(WaveletPyramid(ll, self.bands.LH, self.bands.HL, self.bands.HH))

    def image(self, ll):
        # the reconstruction stays inside the pixel eps-ball, so clamping to [0,1] is enough
        return within_budget(np.clip(self.reconstruct(ll), 0.0, 1.0), self.x, self.eps / 2)

    def pullback(self, g):
        # the inverse transform is orthonormal, so its adjoint is the forward transform
        return dwt_haar(np.asarray(g, dtype=np.float64)).LL

    def project(self, ll):
        return _project_ball(ll, self.bands.LL, self.eps)


def _sign_ascent(model, dom, y, alpha, steps, u0=None, grad_fn=None):
    grad_fn = grad_fn or (lambda img: loss_and_grad(model, img, y)[1])
    u = dom.start() if u0 is None else u0
    step = np.float32(alpha * dom.scale)
    for _ in range(steps):
        g = dom.pullback(grad_fn(dom.image(u)))
        u = dom.project(u + step * np.sign(g))
    return u


def fgsm(model, x, y, eps):
    """One signed-gradient step of size ``eps``, clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    _, g = loss_and_grad(model, x, y)
    eps = np.float32(eps)
    return project_pixels(x + eps * np.sign(g), x, eps)


def bim(model, x, y, eps, alpha, steps):
    """Repeated FGSM steps of size ``alpha``, clipped to the eps-ball and [0, 1] each step."""
    x = np.asarray(x, dtype=np.float32)
    dom = PixelDomain(x, eps)
    return _sign_ascent(model, dom, y, alpha, steps)


def pgd(model, x, y, eps, alpha, steps, random_start: bool = False, rng: np.random.Generator | None = None,
        trace: list | None = None):
    """Projected sign-gradient ascent, optionally from a uniform point in the eps-ball.

    ``trace``, if given, receives every iterate (used to audit the projection).
    """
    x = np.asarray(x, dtype=np.float32)
    dom = PixelDomain(x, eps)
    u = dom.start()
    if random_start and eps > 0:
        if rng is None:
            raise ValueError("random_start needs an rng")
        u = dom.project(x + rng.uniform(-eps, eps, size=x.shape).astype(np.float32))
    step = np.float32(alpha)
    for _ in range(steps):
        _, g = loss_and_grad(model, u, y)
        u = dom.project(u + step * np.sign(g))
        if trace is not None:
            trace.append(u.copy())
    return u


def apgd_checkpoints(steps: int) -> list[int]:
    """Iterations at which Auto-PGD reconsiders its step size.

    The fractions are kept exact so that e.g. 0.57 * 100 is 57, not 57.000000001.
    """
    p1, decay, gap = (Fraction(str(v)) for v in (APGD_P1, APGD_DECAY, APGD_MIN_GAP))
    p = [Fraction(0), p1]
    while True:
        nxt = p[-1] + max(p[-1] - p[-2] - decay, gap)
        if nxt > 1:
            break
        p.append(nxt)
    ws = sorted({math.ceil(pj * steps) for pj in p})
    return [w for w in ws if 0 < w < steps] if steps > 0 else []


def _auto_pgd(model, dom, y, steps):
    n = len(y)
    u_prev = dom.start()
    loss, g = loss_and_grad(model, dom.image(u_prev), y)
    eta = np.full(n, 2.0 * float(dom.eps))
    best_u, best_loss, best_g = u_prev.copy(), loss.copy(), g.copy()

    shape = (n,) + (1,) * (u_prev.ndim - 1)
    u = dom.project(u_prev + eta.reshape(shape) * np.sign(dom.pullback(g)))
    checkpoints = set(apgd_checkpoints(steps))
    ordered = sorted(checkpoints)
    increases = np.zeros(n, dtype=np.int64)
    last_w = 0
    last_eta = eta.copy()
    last_best = best_loss.copy()
    reduced_last = np.ones(n, dtype=bool)
    prev_loss = loss

    for k in range(1, steps):
        loss, g = loss_and_grad(model, dom.image(u), y)
        increases += loss > prev_loss
        better = loss > best_loss
        best_u[better] = u[better]
        best_loss[better] = loss[better]
        best_g[better] = g[better]
        prev_loss = loss

        if k in checkpoints:
            span = k - last_w
            cond1 = increases < APGD_RHO * span
            cond2 = ~reduced_last & (last_eta == eta) & (last_best == best_loss)
            halve = cond1 | cond2
            last_eta = eta.copy()
            last_best = best_loss.copy()
            eta = np.where(halve, eta / 2.0, eta)
            reduced_last = halve
            if halve.any():
                u[halve] = best_u[halve]
                g[halve] = best_g[halve]
                u_prev = u_prev.copy()
                u_prev[halve] = best_u[halve]
            increases[:] = 0
            last_w = k

        z = dom.project(u + eta.reshape(shape) * np.sign(dom.pullback(g)))
        moved = u + APGD_MOMENTUM * (z - u) + (1.0 - APGD_MOMENTUM) * (u - u_prev)
        u_prev, u = u, dom.project(moved)

    loss, _ = loss_and_grad(model, dom.image(u), y)
    better = loss > best_loss
    best_u[better] = u[better]
    return best_u


def auto_pgd(model, x, y, eps, steps):
    """Auto-PGD: momentum sign steps from ``2*eps`` with checkpointed step halving.

    At each checkpoint the step size of an image is halved, and its iterate reset to
    the best point found, when fewer than 75% of the steps since the previous
    checkpoint raised the loss, or when neither its step size nor its best loss
    changed since then. Returns the best-loss iterate.
    """
    if steps < 5:
        raise ValueError(f"auto_pgd needs at least 5 steps, got {steps}")
    x = np.asarray(x, dtype=np.float32)
    if eps == 0:
        return x.copy()
    return _auto_pgd(model, PixelDomain(x, eps), y, steps)


def dwt_attack(kind: str, model, x, y, eps, alpha=None, steps=10, return_ll: bool = False):
    """FGSM / PGD / Auto-PGD restricted to the Haar LL subband."""
    x = np.asarray(x, dtype=np.float32)
    dom = LowBandDomain(x, eps)
    if kind == "fgsm":
        ll = _sign_ascent(model, dom, y, eps, 1)
    elif kind == "pgd":
        ll = _sign_ascent(model, dom, y, alpha, steps)
    elif kind == "autopgd":
        if steps < 5:
            raise ValueError(f"auto_pgd needs at least 5 steps, got {steps}")
        ll = dom.start() if eps == 0 else _auto_pgd(model, dom, y, steps)
    else:
        raise ValueError(f"unknown DWT attack {kind!r}; expected fgsm, pgd or autopgd")
    out = dom.image(ll).astype(np.float32)
    return (out, ll) if return_ll else out


def band_mask(shape, band) -> np.ndarray:
    """Boolean mask of DCT coefficients whose normalised index (u+v)/(H+W-2) lies in ``band``."""
    h, w = shape[-2:]
    uu, vv = np.mgrid[0:h, 0:w]
    r = (uu + vv) / max(h + w - 2, 1)
    lo, hi = band
    return (r >= lo) & (r <= hi)


def spectrum_gradient(model, x, y, n_transforms, sigma, rho, rngs, keep=None) -> np.ndarray:
    """Loss gradient at ``x`` averaged over ``n_transforms`` random spectrum transforms.

    Each transform is ``idct2(dct2(x + xi) * M)``; its adjoint ``idct2(M * dct2(g))``
    carries the gradient back. ``keep`` (boolean, H x W) limits the mask to those
    DCT coefficients.
    """
    b, shape = len(x), (n_transforms,) + x.shape[1:]
    noise = np.stack([r.normal(0.0, sigma, size=shape) if sigma else np.zeros(shape) for r in rngs])
    xs = x[:, None].astype(np.float64) + noise
    if rho:
        mask = np.stack([r.uniform(1 - rho, 1 + rho, size=shape) for r in rngs])
        if keep is not None:
            mask = np.where(keep, mask, 1.0)
        xs = idct2(dct2(xs) * mask)
    # with rho == 0 the mask is identically one and the transform pair is skipped
    _, g = loss_and_grad(model, xs.reshape((-1,) + x.shape[1:]).astype(np.float32),
                         np.repeat(np.asarray(y), n_transforms))
    g = g.reshape((b,) + shape).astype(np.float64)
    if rho:
        g = idct2(dct2(g) * mask)
    return g.mean(axis=1).astype(np.float32)


def spectrum_attack(model, x, y, eps, alpha, steps, n_transforms: int = 8, sigma=None, rho: float = 0.5,
                    rngs=None, band=None):
    """Sign-gradient ascent on gradients averaged over random spectrum transforms.

    Transforms use Gaussian noise ``xi`` (std ``sigma``, default ``eps``) and a
    per-coefficient mask ``M ~ U[1-rho, 1+rho]``. ``rngs`` is one generator per
    image. ``band`` limits the random mask to a normalised frequency band.
    """
    if n_transforms < 1:
        raise ValueError(f"n_transforms must be >= 1, got {n_transforms}")
    x = np.asarray(x, dtype=np.float32)
    sigma = eps if sigma is None else sigma
    if rngs is None:
        rngs = [rngmod.stream(0, "spectrum", i) for i in range(len(x))]
    keep = band_mask(x.shape, band) if band is not None else None

    def grad_fn(img):
        return spectrum_gradient(model, img, y, n_transforms, sigma, rho, rngs, keep)

    return _sign_ascent(model, PixelDomain(x, eps), y, alpha, steps, grad_fn=grad_fn)


# -- dispatch ---------------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float
    alpha: float = 2 / 255
    steps: int = 10
    n_transforms: int = 8
    spectrum_sigma: float | None = None
    rho: float = 0.5
    band: tuple | None = None
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {', '.join(ALL_KINDS)}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.kind in ITERATIVE and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0 for {self.kind}, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.kind in ("autopgd", "dwt_autopgd") and self.steps < 5:
            raise ValueError(f"{self.kind} needs steps >= 5, got {self.steps}")


@dataclass
class AdversarialBatch:
    original: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    linf: np.ndarray
    correct_before: np.ndarray
    predicted: np.ndarray
    success: np.ndarray
    detail_error: np.ndarray | None = None   # DWT attacks: max change of LH/HL/HH before clamping
    spec: AttackSpec | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def success_rate(self) -> float:
        n = int(self.correct_before.sum())
        return float(self.success.sum()) / n if n else 0.0

    @property
    def accuracy(self) -> float:
        return float((self.predicted == self.labels).mean()) if len(self) else 0.0


def _attack_chunk(spec: AttackSpec, model, x, y, ids):
    k, eps = spec.kind, spec.epsilon
    detail = None
    if k == "fgsm":
        adv = fgsm(model, x, y, eps)
    elif k == "bim":
        adv = bim(model, x, y, eps, spec.alpha, spec.steps)
    elif k == "pgd":
        r = rngmod.stream(spec.seed, "pgd-start", *ids[:1]) if spec.random_start else None
        adv = pgd(model, x, y, eps, spec.alpha, spec.steps, spec.random_start, r)
    elif k == "autopgd":
        adv = auto_pgd(model, x, y, eps, spec.steps)
    elif k.startswith("dwt_"):
        adv, ll = dwt_attack(k[4:], model, x, y, eps, spec.alpha, spec.steps, return_ll=True)
        bands = dwt_haar(x.astype(np.float64))
        pre = idwt_haar(WaveletPyramid(ll, bands.LH, bands.HL, bands.HH))
        again = dwt_haar(pre)
        detail = np.max(np.stack([np.abs(getattr(again, n) - getattr(bands, n)).reshape(len(x), -1).max(axis=1)
                                  for n in ("LH", "HL", "HH")]), axis=0)
    else:
        rngs = [rngmod.stream(spec.seed, "spectrum", int(i)) for i in ids]
        adv = spectrum_attack(model, x, y, eps, spec.alpha, spec.steps, spec.n_transforms, spec.spectrum_sigma,
                              spec.rho, rngs, spec.band)
    return adv.astype(np.float32), detail


def run_attack(spec: AttackSpec, model, images, labels, item_ids=None, batch_size: int = 32) -> AdversarialBatch:
    """Attack ``images`` in chunks and audit the result.

    ``item_ids`` name the images for per-item random streams, so results do not
    depend on how the batch is chunked. Success counts only images the model
    classified correctly before the attack.
    """
    x = np.asarray(images, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim == 3:
        x = x[:, None]
    n = len(x)
    ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    if n == 0:
        empty = np.zeros(0, dtype=bool)
        return AdversarialBatch(x.copy(), x.copy(), y, np.zeros(0, dtype=np.float32), empty, np.zeros(0, np.int64),
                                empty, None, spec)
    advs, details, before, after = [], [], [], []
    chunk = 1 if spec.kind == "pgd" and spec.random_start else batch_size
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        adv, det = _attack_chunk(spec, model, x[sl], y[sl], [int(i) for i in ids[sl]])
        advs.append(adv)
        if det is not None:
            details.append(det)
        before.append(model.predict(x[sl]) if hasattr(model, "predict") else model(x[sl]).data.argmax(1))
        after.append(model.predict(adv) if hasattr(model, "predict") else model(adv).data.argmax(1))
    adv = np.concatenate(advs)
    before = np.concatenate(before)
    after = np.concatenate(after)
    linf = np.abs(adv.astype(np.float64) - x).reshape(n, -1).max(axis=1).astype(np.float32)
    correct = before == y
    return AdversarialBatch(x, adv, y, linf, correct, after, correct & (after != y),
                            np.concatenate(details) if details else None, spec)

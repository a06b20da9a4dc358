"""2D frequency transforms on real images.

* DFT with the unnormalised forward convention
  ``F[u, v] = sum_{m,n} x[m, n] exp(-2*pi*i*(u*m/H + v*n/W))``.
* Orthonormal DCT-II / inverse.
* Single-level orthonormal Haar DWT. For each 2x2 block ``[[a, b], [c, d]]``::

      LL = (a + b + c + d) / 2      LH = (a + b - c - d) / 2
      HL = (a - b + c - d) / 2      HH = (a - b - c + d) / 2

All functions operate on the last two axes, so a ``(B, 1, H, W)`` batch works
as well as a single ``(H, W)`` image. Arithmetic is carried out in float64 and
returned in the input's floating dtype (float32 inputs stay float32).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.fft


def _out_dtype(x: np.ndarray):
    return x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64


class Spectrum(NamedTuple):
    re: np.ndarray
    im: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)


class WaveletPyramid(NamedTuple):
    LL: np.ndarray
    LH: np.ndarray
    HL: np.ndarray
    HH: np.ndarray


def dft2(x) -> Spectrum:
    x = np.asarray(x)
    f = np.fft.fft2(x.astype(np.float64), axes=(-2, -1))
    dt = _out_dtype(x)
    return Spectrum(f.real.astype(dt), f.imag.astype(dt))


def idft2(spec: Spectrum) -> np.ndarray:
    re = np.asarray(spec.re)
    f = re.astype(np.float64) + 1j * np.asarray(spec.im, dtype=np.float64)
    return np.fft.ifft2(f, axes=(-2, -1)).real.astype(_out_dtype(re))


def log_magnitude_feature(x) -> np.ndarray:
    """Centred, per-image min-max normalised ``log(1 + |DFT|)``.

    Images whose log-spectrum has zero range (e.g. all-zero input) map to zeros.
    """
    x = np.asarray(x)
    mag = np.abs(np.fft.fft2(x.astype(np.float64), axes=(-2, -1)))
    s = np.fft.fftshift(np.log1p(mag), axes=(-2, -1))
    lo = s.min(axis=(-2, -1), keepdims=True)
    hi = s.max(axis=(-2, -1), keepdims=True)
    rng = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(rng > 0, (s - lo) / np.where(rng > 0, rng, 1.0), 0.0)
    return out.astype(_out_dtype(x))


def dct2(x) -> np.ndarray:
    x = np.asarray(x)
    return scipy.fft.dctn(x.astype(np.float64), type=2, norm="ortho", axes=(-2, -1)).astype(_out_dtype(x))


def idct2(c) -> np.ndarray:
    c = np.asarray(c)
    return scipy.fft.idctn(c.astype(np.float64), type=2, norm="ortho", axes=(-2, -1)).astype(_out_dtype(c))


def _check_even(x: np.ndarray) -> None:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"Haar DWT needs even extents, got {h}x{w}; pad the image to even size first")


def dwt_haar(x) -> WaveletPyramid:
    x = np.asarray(x)
    _check_even(x)
    dt = _out_dtype(x)
    x = x.astype(np.float64)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletPyramid(
        ((a + b + c + d) / 2).astype(dt),
        ((a + b - c - d) / 2).astype(dt),
        ((a - b + c - d) / 2).astype(dt),
        ((a - b - c + d) / 2).astype(dt),
    )


def idwt_haar(p: WaveletPyramid) -> np.ndarray:
    ll = np.asarray(p.LL)
    dt = _out_dtype(ll)
    LL, LH, HL, HH = (np.asarray(band, dtype=np.float64) for band in p)
    if not (LL.shape == LH.shape == HL.shape == HH.shape):
        raise ValueError(f"subband shapes differ: {[np.shape(b) for b in p]}")
    out = np.empty(LL.shape[:-2] + (2 * LL.shape[-2], 2 * LL.shape[-1]))
    out[..., 0::2, 0::2] = (LL + LH + HL + HH) / 2
    out[..., 0::2, 1::2] = (LL + LH - HL - HH) / 2
    out[..., 1::2, 0::2] = (LL - LH + HL - HH) / 2
    out[..., 1::2, 1::2] = (LL - LH - HL + HH) / 2
    return out.astype(dt)

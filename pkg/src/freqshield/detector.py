"""Frequency-domain tamper detector.

An image is mapped to its normalised log-magnitude spectrum ``S``, passed through
an autoencoder trained on clean spectra, and scored three ways:

* ``loss``: reconstruction error ``mean((S - S_hat)**2)``
* ``encoded``: distance of the latent code to the clean latent centroid
* ``decoded``: distance of ``S_hat`` to the clean decoded centroid

Each score has its own threshold, calibrated as a quantile over clean images.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .models import Autoencoder
from .transforms import log_magnitude_feature

STATISTICS = ("loss", "encoded", "decoded")
METHODS = STATISTICS + ("any", "majority")
REJECTED = -1
CALIBRATION_FORMAT = "freqshield-calibration/1"


class NotCalibrated(RuntimeError):
    pass


def preprocess(images) -> np.ndarray:
    """Images in [0, 1] (N,H,W or N,1,H,W) to N,1,H,W log-magnitude spectra."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 4:
        x = x[:, 0]
    return log_magnitude_feature(x)[:, None].astype(np.float32)


@dataclass
class CalibrationStats:
    quantile: float
    t_re: float
    t_enc: float
    t_dec: float
    mu_enc: np.ndarray
    mu_dec: np.ndarray
    n: int
    fingerprint: str

    def threshold(self, name: str) -> float:
        return {"loss": self.t_re, "encoded": self.t_enc, "decoded": self.t_dec}[name]

    def to_dict(self) -> dict:
        return {
            "format": CALIBRATION_FORMAT,
            "quantile": self.quantile,
            "t_re": self.t_re,
            "t_enc": self.t_enc,
            "t_dec": self.t_dec,
            "n": self.n,
            "fingerprint": self.fingerprint,
            "mu_enc_shape": list(self.mu_enc.shape),
            "mu_enc": [float(v) for v in self.mu_enc.ravel()],
            "mu_dec_shape": list(self.mu_dec.shape),
            "mu_dec": [float(v) for v in self.mu_dec.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationStats":
        if d.get("format") != CALIBRATION_FORMAT:
            raise ValueError(f"not a calibration file (format {d.get('format')!r})")
        return cls(
            quantile=float(d["quantile"]),
            t_re=float(d["t_re"]),
            t_enc=float(d["t_enc"]),
            t_dec=float(d["t_dec"]),
            mu_enc=np.asarray(d["mu_enc"], dtype=np.float64).reshape(d["mu_enc_shape"]),
            mu_dec=np.asarray(d["mu_dec"], dtype=np.float64).reshape(d["mu_dec_shape"]),
            n=int(d["n"]),
            fingerprint=str(d["fingerprint"]),
        )


def save_calibration(stats: CalibrationStats, path) -> None:
    # floats go through repr, so a reload reproduces them exactly
    Path(path).write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_calibration(path) -> CalibrationStats:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt calibration file: {exc}") from None
    try:
        return CalibrationStats.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: incomplete calibration file: {exc}") from None


@dataclass
class DetectorBundle:
    model: Autoencoder
    loss_kind: str
    calibration: CalibrationStats | None = None

    def require_calibrated(self) -> CalibrationStats:
        if self.calibration is None:
            raise NotCalibrated("detector is not calibrated; run calibrate first")
        return self.calibration


def fingerprint(images) -> str:
    x = np.ascontiguousarray(np.asarray(images, dtype="<f4"))
    return f"{len(x)}:{hashlib.sha256(x.tobytes()).hexdigest()}"


def forward(model: Autoencoder, images, batch_size: int = 128):
    """Spectra, latent codes and reconstructions for a batch of images."""
    s = preprocess(images)
    zs, recs = [], []
    for start in range(0, len(s), batch_size):
        z = model.encode(s[start:start + batch_size])
        zs.append(z.data)
        recs.append(model.decode(z).data)
    if not zs:
        return s, np.zeros((0, model.latent_dim), np.float32), np.zeros_like(s)
    return s, np.concatenate(zs), np.concatenate(recs)


def _scores(s, z, rec, mu_enc, mu_dec) -> dict:
    s64, rec64 = s.astype(np.float64), rec.astype(np.float64)
    n = len(s)
    return {
        "loss": ((s64 - rec64) ** 2).reshape(n, -1).mean(axis=1),
        "encoded": np.linalg.norm(z.astype(np.float64) - mu_enc, axis=1),
        "decoded": np.linalg.norm((rec64 - mu_dec).reshape(n, -1), axis=1),
    }


def statistics(bundle: DetectorBundle, images, batch_size: int = 128) -> dict:
    """Per-image ``loss``, ``encoded`` and ``decoded`` scores (float64 arrays)."""
    cal = bundle.require_calibrated()
    s, z, rec = forward(bundle.model, images, batch_size)
    return _scores(s, z, rec, cal.mu_enc, cal.mu_dec)


def nearest_rank(values, q: float) -> float:
    """Element ``ceil(q*n)`` (1-based) of the ascending sort."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("nearest_rank of an empty set")
    # decimal q such as 0.95 is taken at face value, not as its binary approximation
    k = math.ceil(Fraction(repr(float(q))) * len(v))
    return float(v[min(max(k, 1), len(v)) - 1])


def calibrate(bundle: DetectorBundle, images, q: float = 0.95, batch_size: int = 128) -> CalibrationStats:
    """Fit centroids and thresholds on clean images; stores and returns the result."""
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("calibration set is empty")
    s, z, rec = forward(bundle.model, images, batch_size)
    mu_enc = z.astype(np.float64).mean(axis=0)
    mu_dec = rec.astype(np.float64).mean(axis=0)
    scores = _scores(s, z, rec, mu_enc, mu_dec)
    t = {k: nearest_rank(v, q) for k, v in scores.items()}
    bad = [k for k, v in t.items() if not v > 0]
    if bad:
        raise ValueError(f"degenerate calibration: non-positive threshold for {', '.join(bad)}")
    cal = CalibrationStats(float(q), t["loss"], t["encoded"], t["decoded"], mu_enc, mu_dec, len(images),
                           fingerprint(images))
    bundle.calibration = cal
    return cal


@dataclass
class DetectionVerdict:
    scores: dict
    flags: dict
    method: str
    flagged: np.ndarray

    def __len__(self):
        return len(self.flagged)


def combine(flags: dict, method: str) -> np.ndarray:
    if method in STATISTICS:
        return flags[method]
    votes = sum(flags[k].astype(np.int64) for k in STATISTICS)
    if method == "any":
        return votes >= 1
    if method == "majority":
        return votes >= 2
    raise ValueError(f"unknown detection method {method!r}; expected one of {', '.join(METHODS)}")


def verdict_from_scores(cal: CalibrationStats, scores: dict, method: str) -> DetectionVerdict:
    if method not in METHODS:
        raise ValueError(f"unknown detection method {method!r}; expected one of {', '.join(METHODS)}")
    flags = {k: scores[k] > cal.threshold(k) for k in STATISTICS}
    return DetectionVerdict(scores, flags, method, combine(flags, method))


def detect(bundle: DetectorBundle, images, method: str = "loss", batch_size: int = 128) -> DetectionVerdict:
    if method not in METHODS:
        raise ValueError(f"unknown detection method {method!r}; expected one of {', '.join(METHODS)}")
    return verdict_from_scores(bundle.require_calibrated(), statistics(bundle, images, batch_size), method)


def guarded_classify(bundle: DetectorBundle, classifier, images, method: str = "loss",
                     verdict: DetectionVerdict | None = None) -> np.ndarray:
    """Class predictions, or ``REJECTED`` where the detector flags the image.

    Flagged images never reach the classifier.
    """
    images = np.asarray(images, dtype=np.float32)
    verdict = verdict or detect(bundle, images, method)
    out = np.full(len(images), REJECTED, dtype=np.int64)
    keep = ~verdict.flagged
    if keep.any():
        x = images[keep]
        out[keep] = classifier.predict(x[:, None] if x.ndim == 3 else x)
    return out


def detection_accuracy(flagged, is_adversarial) -> float:
    flagged, adv = np.asarray(flagged, bool), np.asarray(is_adversarial, bool)
    return float((flagged == adv).mean()) if len(adv) else 0.0


def guarded_accuracy(predictions, labels, is_adversarial) -> float:
    """Rejecting an adversarial image counts as correct; rejecting a clean one does not."""
    p, y, adv = np.asarray(predictions), np.asarray(labels), np.asarray(is_adversarial, bool)
    if not len(p):
        return 0.0
    ok = np.where(p == REJECTED, adv, p == y)
    return float(ok.mean())

"""Datasets: class-folder ingestion, balancing, splitting and a synthetic 4-class phantom set."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import rng as rngmod

ATTACK_KINDS = ("fgsm", "bim", "pgd", "dwt_fgsm", "dwt_pgd", "dwt_autopgd", "spectrum")
SYNTHETIC_CLASSES = ("0_non_demented", "1_very_mild", "2_mild", "3_moderate")
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".pgm"}


@dataclass
class Dataset:
    images: np.ndarray            # (n, H, W) float32 in [0, 1]
    labels: np.ndarray            # (n,) int64, dense from 0
    class_names: list[str]
    paths: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths is not None else None
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), paths)


# -- resizing --------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling: output corners land exactly on input corners."""
    oh, ow = (size, size) if isinstance(size, int) else size
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (oh, ow):
        return img.astype(np.float32)
    r0, r1, fr = _axis_weights(h, oh)
    c0, c1, fc = _axis_weights(w, ow)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return out.astype(np.float32)


def quantize(images: np.ndarray) -> np.ndarray:
    """Nearest 8-bit level, as uint8."""
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(codes: np.ndarray) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def read_image(path, image_size: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from None
    img = arr / np.float32(255.0)
    if image_size is not None:
        img = resize_bilinear(img, image_size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(quantize(img), mode="L").save(path, format="PNG")


def load_dataset(root, image_size: int = 64) -> Dataset:
    """Read ``root/<class_name>/*`` grayscale images; classes are sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"dataset root {root} has no class subdirectories")
    images, labels, paths = [], [], []
    for ci, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class directory {cdir} contains no images")
        for f in files:
            images.append(read_image(f, image_size))
            labels.append(ci)
            paths.append(str(f.relative_to(root)))
    return Dataset(np.stack(images), np.asarray(labels), [d.name for d in class_dirs], paths)


def save_dataset(ds: Dataset, out_dir) -> list[str]:
    """Write 8-bit PNGs under ``out_dir/<class_name>/``; returns the relative paths."""
    out_dir = Path(out_dir)
    paths = []
    seen = [0] * len(ds.class_names)
    for img, lab in zip(ds.images, ds.labels):
        cname = ds.class_names[lab]
        (out_dir / cname).mkdir(parents=True, exist_ok=True)
        rel = f"{cname}/{cname}_{seen[lab]:05d}.png"
        seen[lab] += 1
        write_image(out_dir / rel, img)
        paths.append(rel)
    ds.paths = paths
    return paths


# -- balancing and splitting -------------------------------------------------------

def balance(ds: Dataset, seed: int = 0) -> Dataset:
    """Resample every class to the (floored) mean class count.

    Larger classes are subsampled without replacement; smaller ones keep all their
    items plus duplicates drawn with replacement.
    """
    counts = ds.counts
    if min(counts) < 1:
        raise ValueError(f"every class needs at least one sample, got counts {counts}")
    target = sum(counts) // len(counts)
    picks = []
    for c in range(len(counts)):
        idx = np.flatnonzero(ds.labels == c)
        r = rngmod.stream(seed, "balance", c)
        if len(idx) > target:
            chosen = np.sort(r.choice(idx, size=target, replace=False))
        elif len(idx) < target:
            chosen = np.concatenate([idx, r.choice(idx, size=target - len(idx), replace=True)])
        else:
            chosen = idx
        picks.append(chosen)
    return ds.subset(np.concatenate(picks))


def largest_remainder(total: int, shares) -> list[int]:
    """Integer apportionment of ``total`` by ``shares``; ties go to the earlier share."""
    shares = np.asarray(shares, dtype=np.float64)
    quotas = shares / shares.sum() * total
    base = np.floor(quotas).astype(int)
    rem = quotas - base
    order = sorted(range(len(shares)), key=lambda i: (-rem[i], i))
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base.tolist()


@dataclass(frozen=True)
class SplitPlan:
    train_fraction: float = 0.8
    clean_fraction: float = 0.37
    attacks: tuple = ATTACK_KINDS
    seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "clean_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    @property
    def shares(self) -> list[float]:
        k = len(self.attacks)
        return [self.clean_fraction] + [(1 - self.clean_fraction) / k] * k


@dataclass
class Split:
    train: np.ndarray                               # dataset indices
    test: np.ndarray
    assignment: dict = field(default_factory=dict)  # test index -> "clean" or attack kind

    def test_items(self, label: str) -> np.ndarray:
        return np.asarray(sorted(i for i in self.test if self.assignment[int(i)] == label), dtype=np.int64)


def split(ds: Dataset, plan: SplitPlan = SplitPlan()) -> Split:
    """Stratified train/test split plus clean/attack assignment of every test item."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    train, test = [], []
    for c, n_c in enumerate(ds.counts):
        if n_c == 0:
            continue
        if n_c < 2:
            raise ValueError(f"class {ds.class_names[c]!r} has {n_c} sample; need at least 2 to split")
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rngmod.stream(plan.seed, "split", c).permutation(len(idx))]
        n_train = min(max(int(round(plan.train_fraction * n_c)), 1), n_c - 1)
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    train = np.sort(np.concatenate(train))
    test = np.sort(np.concatenate(test))
    labels = ["clean", *plan.attacks]
    counts = largest_remainder(len(test), plan.shares)
    order = test[rngmod.stream(plan.seed, "assign").permutation(len(test))]
    assignment, start = {}, 0
    for lab, cnt in zip(labels, counts):
        for i in order[start:start + cnt]:
            assignment[int(i)] = lab
        start += cnt
    return Split(train, test, assignment)


def write_manifest(path, ds: Dataset, sp: Split) -> None:
    split_of = {int(i): "train" for i in sp.train}
    split_of.update({int(i): "test" for i in sp.test})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class", "split", "assignment"])
        for i in range(len(ds)):
            w.writerow([ds.paths[i], ds.class_names[ds.labels[i]], split_of[i], sp.assignment.get(i, "clean")])


def read_manifest(path, ds: Dataset) -> Split:
    """Rebuild a :class:`Split` for ``ds`` (loaded from the same root) from its manifest."""
    index = {p: i for i, p in enumerate(ds.paths)}
    train, test, assignment = [], [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["path"] not in index:
                raise ValueError(f"manifest row {row['path']!r} not present in the dataset")
            i = index[row["path"]]
            if row["split"] == "train":
                train.append(i)
            elif row["split"] == "test":
                test.append(i)
                assignment[i] = row["assignment"]
            else:
                raise ValueError(f"unknown split {row['split']!r} in manifest")
    return Split(np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64)), assignment)


# -- synthetic phantoms ------------------------------------------------------------

PHANTOM = {"texture": 0.05, "freq0": 2.0, "freq_step": 1.5, "ventricle_step": 0.03, "edge": 0.04}


def _inside(q: np.ndarray, width: float) -> np.ndarray:
    """Membership of the ellipse ``q <= 1``; a logistic ramp of ``width`` when positive."""
    if width <= 0:
        return (q <= 1.0).astype(np.float64)
    return 0.5 * (1 + np.tanh((1 - np.sqrt(q)) / width))


def _phantom(label: int, size: int, r: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size * 2 - 1
    xx = (xx + 0.5) / size * 2 - 1
    cy, cx = r.uniform(-0.04, 0.04, size=2)
    y, x = yy - cy, xx - cx

    brain = _inside((y / 0.82) ** 2 + (x / 0.68) ** 2, PHANTOM["edge"] / 0.75)
    level = 0.55 + r.uniform(-0.04, 0.04)

    freq = PHANTOM["freq0"] + PHANTOM["freq_step"] * label + r.uniform(-0.3, 0.3)
    theta = r.uniform(0, np.pi)
    phase = r.uniform(0, 2 * np.pi)
    texture = PHANTOM["texture"] * np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    img = brain * (level + texture)

    vr = 0.12 + PHANTOM["ventricle_step"] * label + r.uniform(-0.015, 0.015)
    ventricle = _inside((y / (vr * 1.4)) ** 2 + (x / vr) ** 2, PHANTOM["edge"] / vr)
    img = img * (1 - ventricle) + 0.12 * ventricle

    img += r.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(per_class: int, size: int = 64, seed: int = 0) -> Dataset:
    """Four classes of brain-like phantoms.

    Each image has a fixed outer ellipse, a dark inner "ventricle" whose radius grows
    with the class index, an oriented sinusoidal texture whose spatial frequency
    also grows with the class index, and Gaussian noise (std 0.02). Boundaries are
    blurred over ``PHANTOM["edge"]`` (in units of the half-width) like partial-volume
    edges in a real scan; 0 gives hard edges.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    images, labels = [], []
    for c in range(len(SYNTHETIC_CLASSES)):
        for i in range(per_class):
            images.append(_phantom(c, size, rngmod.stream(seed, "phantom", c, i)))
            labels.append(c)
    return Dataset(np.stack(images), np.asarray(labels), list(SYNTHETIC_CLASSES))

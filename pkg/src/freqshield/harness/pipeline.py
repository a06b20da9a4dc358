"""The experiment stages as plain functions; the CLI is a thin layer over these."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import detector as det
from ..attacks import AttackSpec, run_attack
from ..data import (ATTACK_KINDS, Dataset, SplitPlan, balance, generate_synthetic, load_dataset, read_manifest,
                    save_dataset, split, write_image, write_manifest)
from ..losses import ReconParams, SureParams
from ..models import (Autoencoder, build_simple_cnn, build_unet_autoencoder, load_checkpoint, reconstruction_mse,
                      save_checkpoint, train_autoencoder, train_classifier)
from .config import Epsilon

log = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
ATTACK_MANIFEST = "attack_manifest.csv"


class ArtifactError(Exception):
    """A missing or unreadable input file; maps to exit code 2."""


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"missing {what}: {p}")
    return p


def load_data(root, image_size: int = 64, seed: int = 0):
    """Dataset plus its split: from the manifest when present, else a fresh seeded split."""
    root = _need(root, "dataset directory")
    ds = load_dataset(root, image_size)
    man = root / MANIFEST
    sp = read_manifest(man, ds) if man.exists() else split(ds, SplitPlan(seed=seed))
    return ds, sp


def gen_data(out, per_class: int, seed: int = 0, size: int = 64) -> Dataset:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(per_class, size=size, seed=seed)
    save_dataset(ds, out)
    write_manifest(out / MANIFEST, ds, split(ds, SplitPlan(seed=seed)))
    return ds


def train_classifier_stage(data, out, epochs=30, seed=0, lr=1e-3, batch_size=32, image_size=64):
    ds, sp = load_data(data, image_size, seed)
    train = balance(ds.subset(sp.train), seed)
    model = build_simple_cnn(input_size=image_size, classes=len(ds.class_names), seed=seed)
    history = train_classifier(model, train.images[:, None], train.labels, epochs=epochs, seed=seed, lr=lr,
                               batch_size=batch_size)
    test = ds.subset(sp.test)
    acc = float((model.predict(test.images[:, None]) == test.labels).mean()) if len(test) else 0.0
    save_checkpoint(model, out, {"classes": ds.class_names, "epochs": epochs, "test_accuracy": acc})
    _write_history(out, history)
    return model, history, acc


def train_detector_stage(data, out, loss="mse", epochs=15, seed=0, lr=1e-3, batch_size=32, image_size=64,
                         sure=SureParams(), diffusion_weight=0.1):
    ds, sp = load_data(data, image_size, seed)
    spectra = det.preprocess(ds.images[sp.train])
    model = build_unet_autoencoder(input_size=image_size, seed=seed)
    initial = reconstruction_mse(model, spectra)
    history = train_autoencoder(model, spectra, loss, epochs=epochs, seed=seed, lr=lr, batch_size=batch_size,
                                params=ReconParams(sure, diffusion_weight))
    save_checkpoint(model, out, {"loss_kind": loss, "epochs": epochs, "initial_mse": initial,
                                 "sure_sigma": sure.sigma, "sure_tau": sure.tau, "sure_probes": sure.probes,
                                 "diffusion_weight": diffusion_weight})
    _write_history(out, history)
    return model, history, initial


def _write_history(ckpt, history):
    with open(Path(str(ckpt) + ".history.jsonl"), "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_bundle(detector_path, calib_path=None) -> det.DetectorBundle:
    model, meta = load_checkpoint(_need(detector_path, "detector checkpoint"), with_meta=True)
    if not isinstance(model, Autoencoder):
        raise ArtifactError(f"{detector_path} is not an autoencoder checkpoint")
    cal = det.load_calibration(_need(calib_path, "calibration file")) if calib_path else None
    return det.DetectorBundle(model, meta.get("loss_kind", "unknown"), cal)


def load_classifier(path):
    model = load_checkpoint(_need(path, "classifier checkpoint"))
    if isinstance(model, Autoencoder):
        raise ArtifactError(f"{path} is an autoencoder checkpoint, not a classifier")
    return model


def calibrate_stage(detector_path, data, out, quantile=0.95, image_size=64):
    bundle = load_bundle(detector_path)
    ds = load_dataset(_need(data, "calibration dataset"), image_size)
    cal = det.calibrate(bundle, ds.images, quantile)
    det.save_calibration(cal, out)
    return cal


def attack_spec(kind: str, eps: Epsilon, opts: dict) -> AttackSpec:
    return AttackSpec(kind, eps.value, alpha=opts.get("alpha", 2 / 255), steps=opts.get("steps", 10),
                      n_transforms=opts.get("n_transforms", 8), rho=opts.get("rho", 0.5),
                      random_start=opts.get("random_start", False), seed=opts.get("seed", 0))


def attack_stage(model_path, data, kind, eps: Epsilon, out, items="assigned", image_size=64, **opts):
    """Attack test items and write 8-bit images plus a sidecar manifest.

    ``items="assigned"`` attacks the test items the split assigned to ``kind``;
    ``items="test"`` attacks every test item.
    """
    model = load_classifier(model_path)
    ds, sp = load_data(data, image_size, opts.get("seed", 0))
    ids = sp.test if items == "test" else np.asarray(
        [i for i in sp.test if sp.assignment.get(int(i)) == kind], dtype=np.int64)
    spec = attack_spec(kind, eps, opts)
    batch = run_attack(spec, model, ds.images[ids], ds.labels[ids], item_ids=ids)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ATTACK_MANIFEST, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "source", "class", "attack", "eps", "seed", "linf", "success"])
        for j, i in enumerate(ids):
            src = ds.paths[i]
            cname = ds.class_names[ds.labels[i]]
            rel = f"{cname}/{Path(src).stem}_{kind}.png"
            (out / cname).mkdir(exist_ok=True)
            write_image(out / rel, batch.adversarial[j, 0])
            w.writerow([rel, src, cname, kind, eps.text, spec.seed, repr(float(batch.linf[j])),
                        int(batch.success[j])])
    return batch


# -- evaluation ----------------------------------------------------------------------

REPORT_HEADER = ["model", "loss", "method", "eps", "clean_acc", "attacked_acc", "detect_acc", "guarded_acc",
                 "attack_kind"]


@dataclass
class ReportRow:
    model: str
    loss: str
    method: str
    eps: str
    clean_acc: float
    attacked_acc: float
    detect_acc: float
    guarded_acc: float
    attack_kind: str

    def cells(self):
        return [self.model, self.loss, self.method, self.eps, *(f"{v:.6f}" for v in
                (self.clean_acc, self.attacked_acc, self.detect_acc, self.guarded_acc)), self.attack_kind]


def write_report(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow(r.cells())


def read_report(path) -> list[ReportRow]:
    with open(_need(path, "report"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ArtifactError(f"{path}: unexpected report header {header}")
        rows = []
        for cells in reader:
            if len(cells) != len(REPORT_HEADER):
                raise ArtifactError(f"{path}: malformed row {cells}")
            rows.append(ReportRow(*cells[:4], *map(float, cells[4:8]), cells[8]))
    return rows


def _acc(pred, y) -> float:
    return float((pred == y).mean()) if len(y) else 0.0


@dataclass
class Evaluation:
    rows: list
    table1: list
    summary: dict


@dataclass
class Sweep:
    """Every test item attacked with every kind at every budget."""

    model_id: str
    ids: np.ndarray
    labels: np.ndarray
    assigned: np.ndarray
    clean_pred: np.ndarray
    epsilons: list
    attacks: tuple
    mixed: dict          # eps text -> (presented images, classifier predictions)
    adversarial: dict    # (kind, eps text) -> attacked images for every test item
    table1: list
    audit: dict
    attack_stats: dict

    @property
    def is_adv(self) -> np.ndarray:
        return self.assigned != "clean"


def attack_sweep(model, ds, sp, epsilons, attacks=ATTACK_KINDS, **opts) -> Sweep:
    """Attack every test item with each kind per budget and assemble the mixed sets.

    The mixed set presents each test item clean or attacked according to its
    assignment in the split.
    """
    ids = sp.test
    x, y = ds.images[ids], ds.labels[ids]
    assigned = np.asarray([sp.assignment.get(int(i), "clean") for i in ids])
    clean_pred = model.predict(x[:, None])
    table1, mixed, stats, advs = [], {}, {}, {}
    audit = {"n_attacked": 0, "max_linf_excess": 0.0, "range_violations": 0, "budget_violations": 0,
             "max_detail_error": 0.0}
    for eps in epsilons:
        present = x.copy()
        present_pred = clean_pred.copy()
        for kind in attacks:
            b = run_attack(attack_spec(kind, eps, opts), model, x, y, item_ids=ids)
            adv = b.adversarial[:, 0]
            advs[kind, eps.text] = adv
            linf = np.abs(adv.astype(np.float64) - x).reshape(len(b), -1).max(axis=1)
            audit["n_attacked"] += len(b)
            audit["max_linf_excess"] = max(audit["max_linf_excess"], float((linf - eps.value).max(initial=-1)))
            audit["budget_violations"] += int((linf > eps.value + 1e-6).sum())
            audit["range_violations"] += int(((adv < 0) | (adv > 1)).reshape(len(b), -1).any(axis=1).sum())
            if b.detail_error is not None:
                audit["max_detail_error"] = max(audit["max_detail_error"], float(b.detail_error.max(initial=0)))
            stats.setdefault(kind, {})[eps.text] = {"accuracy": b.accuracy, "success_rate": b.success_rate,
                                                    "n": len(b)}
            table1.append(ReportRow(model.kind, "none", "none", eps.text, _acc(clean_pred, y), b.accuracy, 0.0,
                                    b.accuracy, kind))
            pick = assigned == kind
            present[pick] = adv[pick]
            present_pred[pick] = b.predicted[pick]
        mixed[eps.text] = (present, present_pred)
    return Sweep(model.kind, ids, y, assigned, clean_pred, list(epsilons), tuple(attacks), mixed, advs, table1,
                 audit, stats)


def score_detectors(sweep: Sweep, bundles, methods=("loss", "encoded", "decoded"), per_attack=False,
                    holdout=None):
    """Report rows for each detector x method x budget, plus holdout false-positive rates."""
    for m in methods:
        if m not in det.METHODS:
            raise ValueError(f"unknown detection method {m!r}; expected one of {', '.join(det.METHODS)}")
    y, is_adv = sweep.labels, sweep.is_adv
    rows, holdout_fpr = [], {}
    for bundle in bundles:
        cal = bundle.require_calibrated()
        if holdout is not None:
            hs = det.statistics(bundle, holdout)
            holdout_fpr[bundle.loss_kind] = {m: float(det.verdict_from_scores(cal, hs, m).flagged.mean())
                                             for m in det.METHODS}
        scored = {e: det.statistics(bundle, imgs) for e, (imgs, _) in sweep.mixed.items()}
        for method in methods:
            for eps in sweep.epsilons:
                present_pred = sweep.mixed[eps.text][1]
                verdict = det.verdict_from_scores(cal, scored[eps.text], method)
                guarded = np.where(verdict.flagged, det.REJECTED, present_pred)
                groups = [("all", np.ones(len(y), dtype=bool))]
                if per_attack:
                    groups += [(k, (sweep.assigned == "clean") | (sweep.assigned == k)) for k in sweep.attacks]
                for name, sel in groups:
                    rows.append(ReportRow(
                        sweep.model_id, bundle.loss_kind, method, eps.text,
                        _acc(sweep.clean_pred[sel], y[sel]), _acc(present_pred[sel], y[sel]),
                        det.detection_accuracy(verdict.flagged[sel], is_adv[sel]),
                        det.guarded_accuracy(guarded[sel], y[sel], is_adv[sel]), name))
    return rows, holdout_fpr


def evaluate_stage(model_path, detectors, data, epsilons, methods=("loss", "encoded", "decoded"),
                   per_attack=False, holdout=None, image_size=64, attacks=ATTACK_KINDS, **opts) -> Evaluation:
    """Attack every test item with every kind, then score the mixed set under each detector.

    ``detectors`` is a list of ``(checkpoint, calibration)`` path pairs.
    """
    for m in methods:
        if m not in det.METHODS:
            raise ValueError(f"unknown detection method {m!r}; expected one of {', '.join(det.METHODS)}")
    model = load_classifier(model_path)
    bundles = [load_bundle(d, c) for d, c in detectors]
    ds, sp = load_data(data, image_size, opts.get("seed", 0))
    hold = load_dataset(_need(holdout, "holdout dataset"), image_size).images if holdout else None
    sweep = attack_sweep(model, ds, sp, epsilons, attacks, **opts)
    rows, holdout_fpr = score_detectors(sweep, bundles, methods, per_attack, hold)
    summary = {
        "model": sweep.model_id,
        "n_test": int(len(sweep.ids)),
        "n_mixed_clean": int((~sweep.is_adv).sum()),
        "n_mixed_attacked": int(sweep.is_adv.sum()),
        "clean_accuracy": _acc(sweep.clean_pred, sweep.labels),
        "attacks": sweep.attack_stats,
        "audit": sweep.audit,
        "holdout_fpr": holdout_fpr,
    }
    return Evaluation(rows, sweep.table1, summary)


# -- rendering -----------------------------------------------------------------------

def _pct(v: float) -> str:
    return f"{100 * v:.2f}"


def render_markdown(rows) -> str:
    """Markdown table, one line per report row; rates shown as percentages."""
    attack_only = bool(rows) and all(r.method == "none" for r in rows)
    if attack_only:
        head = ["model", "attack", "eps", "clean %", "attacked %"]
        body = [[r.model, r.attack_kind, r.eps, _pct(r.clean_acc), _pct(r.attacked_acc)] for r in rows]
    else:
        head = ["model", "loss", "method", "eps", "attack", "clean %", "attacked %", "detection %", "guarded %"]
        body = [[r.model, r.loss, r.method, r.eps, r.attack_kind, _pct(r.clean_acc), _pct(r.attacked_acc),
                 _pct(r.detect_acc), _pct(r.guarded_acc)] for r in rows]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    lines += ["| " + " | ".join(cells) + " |" for cells in body]
    return "\n".join(lines) + "\n"


def render_text(rows) -> str:
    widths = [max(len(h), *(len(c) for c in (r.cells()[i] for r in rows))) if rows else len(h)
              for i, h in enumerate(REPORT_HEADER)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*REPORT_HEADER)] + [fmt.format(*r.cells()) for r in rows]) + "\n"

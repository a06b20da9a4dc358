"""``freqshield`` command line.

Every option has a twin ``key`` in a section of the ``--config`` file; values on
the command line win over the file, which wins over built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data or artifact error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from ..attacks import ALL_KINDS
from ..detector import METHODS
from ..losses import LOSS_KINDS, SureParams
from ..models import CheckpointError
from . import pipeline
from .config import SECTIONS, ConfigError, parse_eps_list, parse_list, read_config

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _choice(options):
    def conv(text):
        if text not in options:
            raise ConfigError(f"invalid choice {text!r}; expected one of {', '.join(options)}")
        return text
    return conv


def _methods(text):
    out = parse_list(text)
    for m in out:
        _choice(METHODS)(m)
    return out


@dataclass(frozen=True)
class Opt:
    flag: str
    section: str
    key: str
    conv: object = str
    default: object = None
    required: bool = False
    help: str = ""
    switch: bool = False   # a flag without a value on the command line
    many: bool = False     # repeatable on the command line, comma list in the config

    @property
    def dest(self):
        return self.flag.lstrip("-").replace("-", "_")


SIZE = Opt("--size", "data", "size", int, 64, help="image side length after resizing")
ATTACK_PARAMS = [
    Opt("--alpha", "attack", "alpha", lambda t: float(parse_eps_list(t)[0].exact), 2 / 255,
        help="step size for iterative attacks (fraction or decimal)"),
    Opt("--steps", "attack", "steps", int, 10, help="iterations for iterative attacks"),
    Opt("--n-transforms", "attack", "n_transforms", int, 8, help="spectrum attack: transforms per step"),
    Opt("--rho", "attack", "rho", float, 0.5, help="spectrum attack: mask range"),
    Opt("--random-start", "attack", "random_start", _bool, False, switch=True, help="PGD uniform random start"),
    Opt("--attack-seed", "attack", "seed", int, 0, help="seed for attack randomness"),
]

COMMANDS = {
    "gen-data": ("write a seeded synthetic 4-class dataset and its split manifest", [
        Opt("--out", "data", "dir", Path, required=True, help="output directory"),
        Opt("--per-class", "data", "per_class", int, 200, help="images per class"),
        Opt("--seed", "data", "seed", int, 0),
        SIZE,
    ]),
    "train-classifier": ("train the Simple CNN on the balanced train split", [
        Opt("--data", "data", "dir", Path, required=True),
        Opt("--epochs", "train", "epochs", int, 30),
        Opt("--out", "train", "model", Path, required=True, help="checkpoint path"),
        Opt("--seed", "train", "seed", int, 0),
        Opt("--lr", "train", "lr", float, 1e-3),
        Opt("--batch-size", "train", "batch_size", int, 32),
        Opt("--split-seed", "data", "seed", int, 0, help="split seed when the dataset has no manifest"),
        SIZE,
    ]),
    "train-detector": ("train the spectrum autoencoder on clean training images", [
        Opt("--data", "data", "dir", Path, required=True),
        Opt("--loss", "detector", "loss", _choice(LOSS_KINDS), "mse", help="one of " + ", ".join(LOSS_KINDS)),
        Opt("--epochs", "detector", "epochs", int, 15),
        Opt("--out", "detector", "checkpoint", Path, required=True, help="checkpoint path"),
        Opt("--seed", "detector", "seed", int, 0),
        Opt("--lr", "detector", "lr", float, 1e-3),
        Opt("--batch-size", "detector", "batch_size", int, 32),
        Opt("--sure-sigma", "detector", "sure_sigma", float, 0.01),
        Opt("--sure-tau", "detector", "sure_tau", float, 1e-3),
        Opt("--sure-probes", "detector", "sure_probes", int, 1),
        Opt("--diffusion-weight", "detector", "diffusion_weight", float, 0.1),
        Opt("--split-seed", "data", "seed", int, 0),
        SIZE,
    ]),
    "calibrate": ("fit detector centroids and thresholds on a clean validation set", [
        Opt("--detector", "detector", "checkpoint", Path, required=True),
        Opt("--data", "data", "calibration", Path, required=True, help="clean calibration dataset"),
        Opt("--quantile", "detector", "quantile", float, 0.95),
        Opt("--out", "detector", "calib", Path, required=True, help="calibration file to write"),
        SIZE,
    ]),
    "attack": ("attack test items and write 8-bit images plus a manifest", [
        Opt("--model", "train", "model", Path, required=True),
        Opt("--data", "data", "dir", Path, required=True),
        Opt("--attack", "attack", "kind", _choice(ALL_KINDS), required=True, help="one of " + ", ".join(ALL_KINDS)),
        Opt("--eps", "attack", "eps", parse_eps_list, required=True, help="budget, e.g. 8/255"),
        Opt("--out", "attack", "out", Path, required=True),
        Opt("--items", "attack", "items", _choice(("assigned", "test")), "assigned",
            help="attack the items assigned to this kind, or every test item"),
        Opt("--split-seed", "data", "seed", int, 0),
        *ATTACK_PARAMS, SIZE,
    ]),
    "evaluate": ("score the mixed test set under each detector and write the report", [
        Opt("--model", "train", "model", Path, required=True),
        Opt("--detector", "detector", "checkpoint", Path, required=True, many=True),
        Opt("--calib", "detector", "calib", Path, required=True, many=True),
        Opt("--data", "data", "dir", Path, required=True),
        Opt("--report", "report", "csv", Path, required=True),
        Opt("--eps", "attack", "eps", parse_eps_list, parse_eps_list("4/255,8/255")),
        Opt("--methods", "report", "methods", _methods, ["loss", "encoded", "decoded"]),
        Opt("--per-attack", "report", "per_attack", _bool, False, switch=True, help="add one row per attack kind"),
        Opt("--holdout", "data", "holdout", Path, help="clean dataset for false-positive rates"),
        Opt("--summary", "report", "summary", Path, help="JSON summary with audit and holdout rates"),
        Opt("--table1", "report", "table1", Path, help="attack-only report (no detector)"),
        Opt("--split-seed", "data", "seed", int, 0),
        *ATTACK_PARAMS, SIZE,
    ]),
    "report": ("render a report file as a table", [
        Opt("--in", "report", "csv", Path, required=True),
        Opt("--format", "report", "format", _choice(("md", "text", "csv")), "md"),
        Opt("--out", "report", "out", Path, help="write here instead of stdout"),
    ]),
}


def config_keys() -> dict[str, set[str]]:
    keys = {s: set() for s in SECTIONS}
    for _, opts in COMMANDS.values():
        for o in opts:
            keys[o.section].add(o.key)
    return keys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freqshield", description="frequency-domain adversarial attacks and detection")
    p.add_argument("--config", type=Path, help="sectioned key/value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (text, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=text, description=text)
        for o in opts:
            hint = f"[{o.section}] {o.key}"
            if o.switch:
                sp.add_argument(o.flag, dest=o.dest, action="store_const", const="true", help=f"{o.help} ({hint})")
            elif o.many:
                sp.add_argument(o.flag, dest=o.dest, action="append", help=f"{o.help} ({hint}, repeatable)")
            else:
                sp.add_argument(o.flag, dest=o.dest, help=f"{o.help} ({hint})".strip())
    return p


def resolve(command: str, ns: argparse.Namespace, cfg: dict) -> dict:
    """Merge command line, config and defaults into converted values."""
    out = {}
    for o in COMMANDS[command][1]:
        raw = getattr(ns, o.dest)
        if raw is None:
            raw = cfg.get(o.section, {}).get(o.key)
            if raw is not None and o.many:
                raw = parse_list(raw)
        if raw is None:
            if o.required:
                raise UsageError(f"{command}: {o.flag} is required (or set [{o.section}] {o.key})")
            out[o.dest] = o.default
            continue
        try:
            out[o.dest] = [o.conv(r) for r in raw] if o.many else o.conv(raw)
        except (ConfigError, ValueError) as exc:
            raise UsageError(f"{command}: {o.flag}: {exc}") from None
    return out


def _single_eps(args, command):
    if len(args["eps"]) != 1:
        raise UsageError(f"{command}: --eps takes exactly one value")
    return args["eps"][0]


def _attack_opts(a):
    return {"alpha": a["alpha"], "steps": a["steps"], "n_transforms": a["n_transforms"], "rho": a["rho"],
            "random_start": a["random_start"], "seed": a["attack_seed"]}


def run(command: str, a: dict) -> None:
    if command == "gen-data":
        ds = pipeline.gen_data(a["out"], a["per_class"], a["seed"], a["size"])
        print(f"wrote {len(ds)} images to {a['out']}")
    elif command == "train-classifier":
        _, hist, acc = pipeline.train_classifier_stage(a["data"], a["out"], a["epochs"], a["seed"], a["lr"],
                                                       a["batch_size"], a["size"])
        print(f"trained {len(hist)} epochs; test accuracy {acc:.4f}; wrote {a['out']}")
    elif command == "train-detector":
        sure = SureParams(a["sure_sigma"], a["sure_tau"], a["sure_probes"])
        _, hist, init = pipeline.train_detector_stage(a["data"], a["out"], a["loss"], a["epochs"], a["seed"],
                                                      a["lr"], a["batch_size"], a["size"], sure,
                                                      a["diffusion_weight"])
        final = hist[-1]["mse"] if hist else init
        print(f"trained {len(hist)} epochs ({a['loss']}); reconstruction mse {init:.5f} -> {final:.5f}")
    elif command == "calibrate":
        cal = pipeline.calibrate_stage(a["detector"], a["data"], a["out"], a["quantile"], a["size"])
        print(f"calibrated on {cal.n} images: t_re={cal.t_re:.6g} t_enc={cal.t_enc:.6g} t_dec={cal.t_dec:.6g}")
    elif command == "attack":
        eps = _single_eps(a, command)
        b = pipeline.attack_stage(a["model"], a["data"], a["attack"], eps, a["out"], a["items"], a["size"],
                                  **_attack_opts(a))
        print(f"{a['attack']} eps={eps.text}: {len(b)} images, accuracy {b.accuracy:.4f}, "
              f"success {b.success_rate:.4f}")
    elif command == "evaluate":
        if len(a["detector"]) != len(a["calib"]):
            raise UsageError("evaluate: give one --calib per --detector")
        ev = pipeline.evaluate_stage(a["model"], list(zip(a["detector"], a["calib"])), a["data"], a["eps"],
                                     a["methods"], a["per_attack"], a["holdout"], a["size"], **_attack_opts(a))
        pipeline.write_report(a["report"], ev.rows)
        if a["table1"]:
            pipeline.write_report(a["table1"], ev.table1)
        if a["summary"]:
            Path(a["summary"]).write_text(json.dumps(ev.summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        print(f"wrote {len(ev.rows)} rows to {a['report']}")
    elif command == "report":
        rows = pipeline.read_report(a["in"])
        if a["format"] == "md":
            text = pipeline.render_markdown(rows)
        elif a["format"] == "text":
            text = pipeline.render_text(rows)
        else:
            text = Path(a["in"]).read_text(encoding="utf-8")
        if a["out"]:
            Path(a["out"]).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = read_config(ns.config, config_keys()) if ns.config else {}
        args = resolve(ns.command, ns, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        run(ns.command, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.ArtifactError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration: epsilon parsing and the sectioned config file."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

SECTIONS = ("data", "train", "attack", "detector", "report")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Epsilon:
    """An L-infinity budget kept both as exact text and as the nearest float32."""

    text: str
    exact: Fraction
    value: float

    def __str__(self):
        return self.text


def nearest_float32(q: Fraction) -> np.float32:
    """The float32 closest to ``q``; ties go to the even significand."""
    guess = np.float32(float(q))
    candidates = [np.nextafter(guess, np.float32(-np.inf)), guess, np.nextafter(guess, np.float32(np.inf))]
    best = min(candidates, key=lambda c: (abs(Fraction(float(c)) - q),
                                          int(np.asarray(c).view(np.uint32)) & 1))
    return np.float32(best)


def parse_eps(text: str) -> Epsilon:
    """Parse "8/255", "0.03" or "0" into an :class:`Epsilon` in [0, 1]."""
    raw = str(text).strip()
    try:
        q = Fraction(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse epsilon {text!r}; use a fraction like 8/255 or a decimal") from None
    if not 0 <= q <= 1:
        raise ConfigError(f"epsilon {text!r} is outside [0, 1]")
    return Epsilon(raw, q, float(nearest_float32(q)))


def parse_eps_list(text: str) -> list[Epsilon]:
    items = [t for t in str(text).split(",") if t.strip()]
    if not items:
        raise ConfigError("empty epsilon list")
    return [parse_eps(t) for t in items]


def parse_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def read_config(path, allowed: dict[str, set[str]]) -> dict[str, dict[str, str]]:
    """Read a sectioned key/value file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(Path(path), encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        for key in cp[section]:
            if key not in allowed[section]:
                known = ", ".join(sorted(allowed[section])) or "none"
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}] (known: {known})")
        out[section] = dict(cp[section])
    return out

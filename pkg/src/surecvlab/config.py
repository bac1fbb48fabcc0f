"""Flat ``key = value`` study configuration.

One assignment per line; ``#`` starts a comment. Values are parsed per key:

* numbers and integers: ``n = 800``
* vectors: ``theta = 1.3893, 1.5``
* matrices: ``A = diag(1, 40)``, ``A = identity``, or rows ``A = 1, 0; 0, 1``
* grids: an explicit list, ``linspace(a, b, num)`` or ``logspace(a, b, num)``
  (geometric from ``a`` to ``b``), optionally prefixed by ``0 +`` to add zero.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


class ConfigError(ValueError):
    """Malformed or out-of-range configuration; reported with exit code 2."""


def read_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------


def _float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ConfigError(f"not a number: {s!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"not a finite number: {s!r}")
    return v


def as_float(s): return _float(s)


def as_int(s):
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"not an integer: {s!r}") from None


def as_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def as_vector(s) -> np.ndarray:
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if not parts:
        raise ConfigError("empty vector")
    return np.array([_float(p) for p in parts])


def as_int_list(s) -> list[int]:
    return [as_int(p) for p in re.split(r"[,\s]+", s.strip()) if p]


_CALL = re.compile(r"^(\w+)\s*\((.*)\)$")


def as_matrix(s) -> np.ndarray | str:
    """Matrix literal; ``identity`` is returned as a marker resolved once ``k`` is known."""
    s = s.strip()
    if s.lower() in ("identity", "eye", "i"):
        return "identity"
    m = _CALL.match(s)
    if m:
        if m.group(1).lower() != "diag":
            raise ConfigError(f"unknown matrix constructor {m.group(1)!r}")
        return np.diag(as_vector(m.group(2)))
    rows = [as_vector(r) for r in s.split(";")]
    if len({r.size for r in rows}) != 1:
        raise ConfigError("matrix rows have different lengths")
    return np.vstack(rows)


def as_grid(s) -> np.ndarray | str:
    s = s.strip()
    if s.lower() == "all":
        return "all"
    prefix_zero = False
    if re.match(r"^0\s*\+", s):
        prefix_zero = True
        s = s.split("+", 1)[1].strip()
    m = _CALL.match(s)
    if m:
        fn = m.group(1).lower()
        args = as_vector(m.group(2))
        if fn not in ("linspace", "logspace") or args.size != 3:
            raise ConfigError(f"grid must be linspace(a,b,n) or logspace(a,b,n), got {s!r}")
        a, b, num = args[0], args[1], int(args[2])
        if num < 1:
            raise ConfigError("grid needs at least one point")
        if fn == "linspace":
            g = np.linspace(a, b, num)
        else:
            if a <= 0 or b <= 0:
                raise ConfigError("logspace endpoints must be positive")
            g = np.geomspace(a, b, num)
    elif s == "":
        g = np.empty(0)
    else:
        g = as_vector(s)
    if prefix_zero:
        g = np.concatenate([[0.0], g])
    return g


def choice(*options) -> Callable[[str], str]:
    def parse(s):
        v = s.strip().lower()
        if v not in options:
            raise ConfigError(f"expected one of {', '.join(options)}; got {s!r}")
        return v
    return parse


def str_list(s) -> list[str]:
    return [p.strip().lower() for p in s.split(",") if p.strip()]


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str | None
    help: str = ""


COMMON = {
    "seed": Key(as_int, "20240601", "master seed (overridden by SURECVLAB_SEED)"),
    "out": Key(str, "-", "output CSV path, '-' for stdout"),
    "threads": Key(as_int, "1", "worker threads, 0 = all cores"),
    "preset": Key(str, "", "named parameter preset"),
}


def resolve(schema: dict[str, Key], raw: dict[str, str], presets: dict[str, dict[str, str]]) -> dict[str, Any]:
    """Apply preset and defaults, reject unknown keys, parse every value."""
    full = {**COMMON, **schema}
    for key in raw:
        if key not in full:
            raise ConfigError(f"unknown configuration key {key!r}")
    merged = {k: v.default for k, v in full.items()}
    preset = raw.get("preset", "").strip().lower()
    if preset:
        if preset not in presets:
            raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(sorted(presets)) or 'none'}")
        merged.update(presets[preset])
    merged.update(raw)
    out = {}
    for key, spec in full.items():
        value = merged[key]
        if value is None:
            out[key] = None
            continue
        try:
            out[key] = spec.parse(value)
        except ConfigError as exc:
            raise ConfigError(f"key {key!r}: {exc}") from None
    out["preset"] = preset
    return out

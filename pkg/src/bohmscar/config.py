"""Run configuration: an INI file with fixed sections and typed keys.

Unknown sections or keys are rejected.  Floats are written with ``repr`` so a
config survives a write/read cycle unchanged.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import math
from pathlib import Path
from typing import Any

from .bohm import PANEL_CUTS, DEFAULT_RADII

FORMAT_VERSION = 1

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "domain": {
        "kind": ("str", "stadium"),
        "straight_length": ("float", 1.0),
        "radius": ("float", 1.0),
    },
    "grid": {
        "points_per_wavelength": ("float", 8.0),
        "e_max": ("float", 3456.0),
        "capture_threshold": ("float", 0.999),
        "auto_raise": ("bool", True),
        "stencil": ("str", "fourth"),
    },
    "packet": {
        "alpha": ("float", 30.68),
        "center": ("floats", (1.0, 0.5)),
        "momentum": ("floats", (96.0 / math.sqrt(5.0), -48.0 / math.sqrt(5.0))),
    },
    "ensemble": {
        "n_traj": ("int", 80),
        "rings": ("floats", DEFAULT_RADII),
        "per_ring": ("ints?", None),
        "seed": ("int", 0),
        "panel_cuts": ("floats", PANEL_CUTS),
    },
    "integrator": {
        "method": ("str", "LSODA"),
        "atol": ("float", 1e-8),
        "rtol": ("float", 1e-8),
        "dt_out": ("float", 2.5e-4),
        "t_end": ("float", 0.1),
    },
    "survival": {
        "sigma": ("float", 156.25),
        "prominence": ("float", 0.02),
        "main_fraction": ("float", 0.1),
        "match_fraction": ("float", 0.5),
        "top_k": ("int", 5),
    },
    "scar": {
        "center_energy": ("float", 2304.0),
        "width": ("float?", None),
        "n_periods": ("float", 2.0),
        "second_n_periods": ("float", 4.0),
        "tube_width": ("float", 0.1),
    },
    "snapshots": {
        "times": ("floats", PANEL_CUTS),
        "centroid_t_max": ("float", 0.023),
    },
    "output": {
        "directory": ("str", "results"),
        "format_version": ("int", FORMAT_VERSION),
    },
}


class ConfigError(ValueError):
    pass


def _parse(kind: str, text: str, where: str):
    text = text.strip()
    try:
        if kind.endswith("?"):
            if text == "" or text.lower() == "none":
                return None
            kind = kind[:-1]
        if kind == "float":
            return float(text)
        if kind == "int":
            return int(text)
        if kind == "str":
            return text
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind}") from None
    raise ConfigError(f"{where}: unsupported type {kind}")


def _format(kind: str, value) -> str:
    if value is None:
        return ""
    kind = kind.rstrip("?")
    if kind == "float":
        return repr(float(value))
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "ints":
        return ", ".join(str(int(v)) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


class Config:
    """Typed view of the run configuration; ``cfg["packet"]["alpha"]``."""

    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, val in keys.items():
                self.set(section, key, val)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self.values == other.values

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        kind = SCHEMA[section][key][0]
        if isinstance(value, str):
            value = _parse(kind, value, f"[{section}] {key}")
        elif value is not None and kind.rstrip("?") in ("floats", "ints"):
            value = tuple(value)
        self.values[section][key] = value

    def copy(self) -> "Config":
        out = Config()
        out.values = copy.deepcopy(self.values)
        return out

    def subset(self, sections) -> dict:
        return {s: self.values[s] for s in sections}

    def to_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (kind, _) in keys.items():
                lines.append(f"{key} = {_format(kind, self.values[section][key])}".rstrip())
            lines.append("")
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls()
        for section in parser.sections():
            for key, val in parser.items(section):
                cfg.set(section, key, val)
        if cfg["output"]["format_version"] != FORMAT_VERSION:
            raise ConfigError(f"config format version {cfg['output']['format_version']} is not supported")
        return cfg

    @classmethod
    def read(cls, path: str | Path) -> "Config":
        return cls.from_text(Path(path).read_text(), str(path))


def digest(obj) -> str:
    """sha256 of a canonical JSON encoding (floats via repr, keys sorted)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode()).hexdigest()

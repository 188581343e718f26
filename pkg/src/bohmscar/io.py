"""Grid files and provenance headers shared by every exported artifact.

Grid file layout (ASCII)::

    # any number of comment lines
    nx <int>
    ny <int>
    dx <float>
    dy <float>
    t <float>
    x0 <float>
    y0 <float>
    <nx * ny values, one per line, row-major over (ix, iy)>

Values are written with ``repr`` so reading them back is lossless.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__

GRID_KEYS = ("nx", "ny", "dx", "dy", "t", "x0", "y0")


@dataclass
class GridFile:
    values: np.ndarray
    dx: float
    dy: float
    t: float
    x0: float = 0.0
    y0: float = 0.0
    comments: tuple[str, ...] = ()


def write_grid(path: str | Path, values: np.ndarray, dx: float, dy: float, t: float,
               x0: float = 0.0, y0: float = 0.0, header: Sequence[str] = ()) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("grid values must be two-dimensional")
    nx, ny = values.shape
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(f"nx {nx}\nny {ny}\n")
        for k, v in (("dx", dx), ("dy", dy), ("t", t), ("x0", x0), ("y0", y0)):
            fh.write(f"{k} {float(v)!r}\n")
        fh.write("\n".join(repr(float(v)) for v in values.ravel()))
        fh.write("\n")


def read_grid(path: str | Path) -> GridFile:
    comments, head = [], {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        comments.append(lines[k][1:].strip())
        k += 1
    for key in GRID_KEYS:
        name, _, val = lines[k].partition(" ")
        if name != key:
            raise ValueError(f"{path}: expected header field {key!r}, found {name!r}")
        head[key] = val
        k += 1
    nx, ny = int(head["nx"]), int(head["ny"])
    data = np.array([float(v) for v in lines[k:] if v], dtype=float)
    if data.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {data.size}")
    return GridFile(
        data.reshape(nx, ny), float(head["dx"]), float(head["dy"]), float(head["t"]),
        float(head["x0"]), float(head["y0"]), tuple(comments),
    )


def provenance_lines(stage: str, key: str, upstream: dict[str, str]) -> list[str]:
    """Header lines naming the tool version, stage key and upstream keys (no timestamps)."""
    lines = [f"bohmscar {__version__}", f"stage {stage} key {key}"]
    lines += [f"upstream {name} {up}" for name, up in sorted(upstream.items())]
    return lines


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

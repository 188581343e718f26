"""Dirichlet eigenpairs of H = -laplacian (mass 1/2, hbar = 1) on a masked grid.

The operator is the fourth-order five-point-per-axis finite-difference
Laplacian.  Exterior nodes are zero; across straight walls that lie on grid
lines the stencil uses the odd mirror image, which keeps the matrix symmetric
(only diagonal entries change) and makes rectangle eigenvectors exact sines.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .geometry import Domain, domain_from_params

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"BOHMSCAR-BASIS\n"
DEFAULT_MEMORY_BUDGET = 3 * 2**30

# second and fourth order central stencils for -d2/dx2, offsets 0, 1, 2
STENCILS = {
    "second": (2.0, -1.0, 0.0),
    "fourth": (30.0 / 12.0, -16.0 / 12.0, 1.0 / 12.0),
}


class GridSizeError(MemoryError):
    pass


class EigenSolveError(RuntimeError):
    pass


class BasisFileError(IOError):
    pass


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Uniform square-cell grid over the domain bounding box.

    Node (i, j) sits at (x0 + i*h, y0 + j*h).  ``mask`` flags strict interior
    nodes; unknowns are the masked nodes in C order of the (nx, ny) array.
    """

    domain: Domain
    nx: int
    ny: int
    h: float
    x0: float = 0.0
    y0: float = 0.0
    mask: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.mask is None:
            X, Y = self.mesh()
            object.__setattr__(self, "mask", self.domain.interior(X, Y))

    @property
    def dx(self) -> float:
        return self.h

    @property
    def dy(self) -> float:
        return self.h

    @property
    def n_interior(self) -> int:
        return int(self.mask.sum())

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.x0 + np.arange(self.nx) * self.h
        y = self.y0 + np.arange(self.ny) * self.h
        return np.meshgrid(x, y, indexing="ij")

    def interior_points(self) -> np.ndarray:
        X, Y = self.mesh()
        return np.column_stack([X[self.mask], Y[self.mask]])

    def to_full(self, values: np.ndarray, fill=0.0) -> np.ndarray:
        """Scatter interior values into an (nx, ny) array."""
        out = np.full((self.nx, self.ny), fill, dtype=np.result_type(values, type(fill)))
        out[self.mask] = values
        return out

    def metadata(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "h": self.h,
            "x0": self.x0,
            "y0": self.y0,
            "n_interior": self.n_interior,
        }

    def same_as(self, other: "GridSpec") -> bool:
        return (
            self.metadata() == other.metadata()
            and self.domain.params() == other.domain.params()
            and np.array_equal(self.mask, other.mask)
        )


def weyl_count(domain: Domain, e_max: float) -> float:
    """Two-term Weyl estimate of the number of Dirichlet eigenvalues below ``e_max``."""
    return domain.area / (4 * math.pi) * e_max - domain.perimeter / (4 * math.pi) * math.sqrt(e_max)


def _memory_estimate(n_modes: float, n_nodes: int, n_padded: int) -> int:
    # interior modes + value/gradient cubes used for off-grid evaluation
    return int(8 * max(n_modes, 1) * (n_nodes + 3 * n_padded))


def build_grid(
    domain: Domain,
    points_per_wavelength: float = 8,
    e_max: float = 3456.0,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> GridSpec:
    """Choose a grid resolving the shortest wavelength 2*pi/sqrt(e_max).

    The spacing divides ``domain.grid_unit`` so straight walls sit on grid lines.
    """
    if points_per_wavelength < 6:
        raise ValueError(f"points_per_wavelength must be >= 6, got {points_per_wavelength}")
    if not e_max > 0:
        raise ValueError(f"e_max must be positive, got {e_max}")
    k_max = math.sqrt(e_max)
    unit = domain.grid_unit
    n = math.ceil(points_per_wavelength * k_max * unit / (2 * math.pi) - 1e-9)
    h = unit / n
    xmin, xmax, ymin, ymax = domain.bbox
    nx = int(math.floor((xmax - xmin) / h + 1e-9)) + 1
    ny = int(math.floor((ymax - ymin) / h + 1e-9)) + 1
    need = _memory_estimate(weyl_count(domain, e_max) * 1.1, nx * ny, (nx + 8) * (ny + 8))
    if need > memory_budget:
        raise GridSizeError(
            f"grid {nx}x{ny} (h={h:.3g}) with ~{weyl_count(domain, e_max):.0f} modes needs "
            f"~{need / 2**20:.0f} MiB, budget is {memory_budget / 2**20:.0f} MiB"
        )
    return GridSpec(domain, nx, ny, h, xmin, ymin)


# ---------------------------------------------------------------------------
# operator


def ghost_map(grid: GridSpec, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Source interior index and sign for every node of the padded grid.

    Returns ``(src, sign)`` of shape (nx + 2*pad, ny + 2*pad); ``src`` is -1
    where the value is identically zero (walls, arc exterior).
    """
    index = -np.ones((grid.nx, grid.ny), dtype=np.int64)
    index[grid.mask] = np.arange(grid.n_interior)
    I, J = np.meshgrid(np.arange(-pad, grid.nx + pad), np.arange(-pad, grid.ny + pad), indexing="ij")
    src = -np.ones(I.shape, dtype=np.int64)
    sign = np.zeros(I.shape)
    inb = (I >= 0) & (I < grid.nx) & (J >= 0) & (J < grid.ny)
    src[inb] = index[I[inb], J[inb]]
    sign[src >= 0] = 1.0
    x = grid.x0 + I * grid.h
    y = grid.y0 + J * grid.h
    for wall in grid.domain.mirror_walls:
        hit = wall.beyond(x, y, tol=0.25 * grid.h) & (src < 0)
        mx, my = wall.mirror(x[hit], y[hit])
        mi = np.rint((mx - grid.x0) / grid.h).astype(np.int64)
        mj = np.rint((my - grid.y0) / grid.h).astype(np.int64)
        ok = (mi >= 0) & (mi < grid.nx) & (mj >= 0) & (mj < grid.ny)
        s = -np.ones(mi.shape, dtype=np.int64)
        s[ok] = index[mi[ok], mj[ok]]
        hi, hj = np.nonzero(hit)
        good = s >= 0
        src[hi[good], hj[good]] = s[good]
        sign[hi[good], hj[good]] = -1.0
    return src, sign


def laplacian(grid: GridSpec, stencil: str = "fourth") -> sp.csr_matrix:
    """Sparse symmetric matrix of -laplacian on the interior unknowns."""
    c0, c1, c2 = STENCILS[stencil]
    pad = 2
    src, sign = ghost_map(grid, pad)
    I, J = np.nonzero(grid.mask)
    row = np.arange(grid.n_interior)
    rows, cols, vals = [row], [row], [np.full(grid.n_interior, 2 * c0)]
    for di, dj in ((1, 0), (0, 1)):
        for k, c in ((1, c1), (2, c2)):
            if c == 0.0:
                continue
            for s in (k, -k):
                nb = src[I + pad + s * di, J + pad + s * dj]
                sg = sign[I + pad + s * di, J + pad + s * dj]
                ok = nb >= 0
                rows.append(row[ok])
                cols.append(nb[ok])
                vals.append(c * sg[ok])
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_interior, grid.n_interior),
    )
    A.sum_duplicates()
    return A / grid.h**2


def inertia_count(A: sp.spmatrix, shift: float) -> int:
    """Number of eigenvalues of symmetric ``A`` strictly below ``shift`` (Sylvester)."""
    n = A.shape[0]
    M = (A - shift * sp.identity(n, format="csc")).tocsc()
    lu = sla.splu(
        M,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    return int(np.count_nonzero(lu.U.diagonal() < 0))


# ---------------------------------------------------------------------------
# eigenbasis


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Ascending eigenvalues and grid-normalised eigenfunctions.

    ``modes[n]`` holds psi_n at interior nodes with sum(psi_n**2) * h**2 == 1.
    """

    energies: np.ndarray
    modes: np.ndarray
    grid: GridSpec
    e_max: float
    stencil: str = "fourth"

    def __len__(self) -> int:
        return len(self.energies)

    @property
    def domain(self) -> Domain:
        return self.grid.domain

    def evaluator(self):
        """Cached off-grid evaluator (see :class:`bohmscar.packet.FieldEvaluator`)."""
        ev = self.__dict__.get("_evaluator")
        if ev is None:
            from .packet import FieldEvaluator

            ev = FieldEvaluator(self)
            object.__setattr__(self, "_evaluator", ev)
        return ev

    def truncated(self, e_max: float) -> "EigenBasis":
        keep = self.energies <= e_max
        return EigenBasis(self.energies[keep], self.modes[keep], self.grid, e_max, self.stencil)


def _window_plan(total: int, e_max: float, per_window: int) -> np.ndarray:
    n_win = max(1, math.ceil(total / per_window))
    return np.linspace(0.0, e_max, n_win + 1)


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so the first significant component is positive."""
    thresh = 1e-6 * np.abs(V).max(axis=0)
    first = np.argmax(np.abs(V) > thresh, axis=0)
    s = np.sign(V[first, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def solve_eigen(
    domain: Domain,
    grid: GridSpec,
    e_max: float,
    stencil: str = "fourth",
    per_window: int = 80,
    seed: int = 0,
    dense_below: int = 1500,
) -> EigenBasis:
    """All eigenpairs of the discrete Dirichlet operator with E <= e_max.

    Energy windows are swept with shift-invert Lanczos; the number of
    eigenvalues found in each window is checked against the Sylvester inertia
    count.  A final Rayleigh-Ritz pass over the union makes the set
    orthonormal to machine precision.
    """
    if grid.domain.params() != domain.params():
        raise ValueError("grid was built for a different domain")
    A = laplacian(grid, stencil)
    n = A.shape[0]
    if n <= dense_below:
        w, V = la.eigh(A.toarray())
        keep = w <= e_max
        w, V = w[keep], V[:, keep]
    else:
        A = A.tocsc()
        total = inertia_count(A, e_max)
        if total == 0:
            w, V = np.empty(0), np.empty((n, 0))
        else:
            rng = np.random.default_rng(seed)
            v0 = rng.standard_normal(n)
            edges = _window_plan(total, e_max, per_window)
            counts = [0] + [inertia_count(A, e) for e in edges[1:-1]] + [total]
            ws, Vs = [], []
            for (lo, hi), (c_lo, c_hi) in zip(zip(edges[:-1], edges[1:]), zip(counts[:-1], counts[1:])):
                want = c_hi - c_lo
                if want == 0:
                    continue
                k = want + max(8, want // 5)
                for attempt in range(4):
                    k = min(k, n - 2)
                    wk, Vk = sla.eigsh(A, k=k, sigma=0.5 * (lo + hi), which="LM", v0=v0, tol=0.0)
                    sel = (wk > lo) & (wk <= hi) if lo > 0 else wk <= hi
                    if sel.sum() == want:
                        break
                    k = int(k * 1.5) + 4
                else:
                    raise EigenSolveError(
                        f"window ({lo:.6g}, {hi:.6g}] shift {0.5 * (lo + hi):.6g}: found "
                        f"{int(sel.sum())} eigenvalues, inertia count says {want}"
                    )
                ws.append(wk[sel])
                Vs.append(Vk[:, sel])
                log.debug("window (%g, %g]: %d modes", lo, hi, want)
            V = np.concatenate(Vs, axis=1)
            # Rayleigh-Ritz over the union of windows
            Q, _ = np.linalg.qr(V)
            B = Q.T @ (A @ Q)
            w, U = la.eigh(0.5 * (B + B.T))
            V = Q @ U
            if len(w) != total:
                raise EigenSolveError(f"collected {len(w)} modes, inertia count is {total}")
    V = _canonical_signs(V)
    modes = np.ascontiguousarray(V.T) / grid.h
    if np.any(w <= 0):
        raise EigenSolveError("non-positive eigenvalue encountered")
    return EigenBasis(np.ascontiguousarray(w), modes, grid, float(e_max), stencil)


# ---------------------------------------------------------------------------
# cache file


def save_basis(basis: EigenBasis, path: str | Path) -> str:
    """Write the basis cache file; returns the payload checksum."""
    payload = (
        np.ascontiguousarray(basis.energies, dtype="<f8").tobytes()
        + np.ascontiguousarray(basis.modes, dtype="<f8").tobytes()
    )
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format_version": FORMAT_VERSION,
        "domain": basis.domain.params(),
        "grid": basis.grid.metadata(),
        "e_max": basis.e_max,
        "stencil": basis.stencil,
        "count": len(basis),
        "payload_bytes": len(payload),
        "checksum": digest,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return digest


def read_basis_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise BasisFileError(f"{path}: not a basis file")
        return json.loads(fh.readline())


def load_basis(path: str | Path) -> EigenBasis:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise BasisFileError(f"{path}: not a basis file")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise BasisFileError(f"{path}: corrupt header") from exc
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise BasisFileError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise BasisFileError(f"{path}: checksum mismatch (truncated or corrupted payload)")
    domain = domain_from_params(header["domain"])
    g = header["grid"]
    grid = GridSpec(domain, g["nx"], g["ny"], g["h"], g["x0"], g["y0"])
    if grid.n_interior != g["n_interior"]:
        raise BasisFileError(f"{path}: interior mask does not match stored grid")
    m = header["count"]
    data = np.frombuffer(payload, dtype="<f8")
    energies = data[:m].astype(np.float64)
    modes = data[m:].reshape(m, grid.n_interior).astype(np.float64)
    return EigenBasis(energies, modes, grid, header["e_max"], header["stencil"])

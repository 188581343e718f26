"""Coherent-state wave packet: projection, exact spectral evolution, field sampling.

Units: hbar = 1, mass 1/2, so H = -laplacian and v = 2 * Im(grad(phi) / phi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .spectral import EigenBasis, GridSpec, ghost_map

MASS = 0.5
HBAR = 1.0
PAD = 4

# fourth-order central first derivative, offsets -2..2
_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
# fourth-order second derivative, offsets -2..2
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class CoherentParams:
    alpha: float = 30.68
    center: tuple[float, float] = (1.0, 0.5)
    momentum: tuple[float, float] = (96.0 / math.sqrt(5.0), -48.0 / math.sqrt(5.0))

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def central_energy(self) -> float:
        """|P0|^2 / (2m): the classical energy of the packet centre."""
        return (self.momentum[0] ** 2 + self.momentum[1] ** 2) / (2 * MASS)

    @property
    def mean_energy(self) -> float:
        """<H> of the untruncated Gaussian: (|P0|^2 + 2*alpha) / (2m)."""
        return (self.momentum[0] ** 2 + self.momentum[1] ** 2 + 2 * self.alpha) / (2 * MASS)

    @property
    def speed(self) -> float:
        return math.hypot(*self.momentum) / MASS

    def velocity(self) -> np.ndarray:
        return np.asarray(self.momentum) / MASS


def coherent_state(params: CoherentParams, grid: GridSpec) -> np.ndarray:
    """Gaussian packet on the interior nodes, renormalised to unit grid norm."""
    x0, y0 = params.center
    if not bool(grid.domain.interior(x0, y0)):
        raise ValueError(f"packet centre {params.center} is not inside the domain")
    pts = grid.interior_points()
    x, y = pts[:, 0], pts[:, 1]
    a = params.alpha
    px, py = params.momentum
    phi = np.exp(-a * (x - x0) ** 2 - a * (y - y0) ** 2 + 1j * (px * x + py * y))
    return phi / math.sqrt(np.sum(np.abs(phi) ** 2) * grid.h**2)


def position_expectation(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """<x>, <y> of a grid field (interior values)."""
    rho = np.abs(values) ** 2
    pts = grid.interior_points()
    return pts.T @ rho / rho.sum()


@dataclass(frozen=True, eq=False)
class SpectralState:
    """phi(t) = sum_n coeffs[n] * psi_n; ``coeffs`` already carry exp(-i E_n t)."""

    coeffs: np.ndarray
    energies: np.ndarray
    t: float = 0.0
    norm_capture: float = 1.0

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))

    def energy_expectation(self) -> float:
        p = np.abs(self.coeffs) ** 2
        return float(p @ self.energies / p.sum())


def project(values: np.ndarray, basis: EigenBasis, capture_threshold: float = 0.999) -> SpectralState:
    """Expand a grid field in the eigenbasis: c_n = sum psi_n * phi * h^2."""
    if values.shape != (basis.grid.n_interior,):
        raise ValueError("field and basis do not share a grid")
    c = basis.modes @ values * basis.grid.h**2
    total = float(np.sum(np.abs(values) ** 2) * basis.grid.h**2)
    capture = float(np.sum(np.abs(c) ** 2) / total) if total > 0 else 0.0
    if capture < capture_threshold:
        raise ProjectionError(
            f"norm capture {capture:.6f} is below {capture_threshold}; raise E_max "
            f"(now {basis.e_max:g}) or the grid resolution"
        )
    return SpectralState(c.astype(complex), basis.energies, 0.0, capture)


def evolve(state: SpectralState, t: float) -> SpectralState:
    """Advance by ``t``: c_n -> c_n * exp(-i E_n t)."""
    if t == 0:
        return state
    return replace(state, coeffs=state.coeffs * np.exp(-1j * state.energies * t), t=state.t + t)


# ---------------------------------------------------------------------------
# off-grid evaluation


def _lagrange4(u: np.ndarray) -> np.ndarray:
    """Cubic Lagrange weights for nodes -1, 0, 1, 2 at fractional offset u."""
    return np.stack(
        [
            -u * (u - 1) * (u - 2) / 6.0,
            (u + 1) * (u - 1) * (u - 2) / 2.0,
            -(u + 1) * u * (u - 2) / 2.0,
            (u + 1) * u * (u - 1) / 6.0,
        ],
        axis=-1,
    )


@dataclass
class FieldSample:
    phi: complex
    grad_phi: np.ndarray
    R: float
    S_phase: float
    velocity: np.ndarray
    Q: float
    near_node: bool = False

    @property
    def momentum(self) -> np.ndarray:
        return MASS * self.velocity


class FieldEvaluator:
    """Mode values and 4th-order gradients on a padded grid, for bicubic sampling.

    The padded cube has shape (n_modes, 3, P) with channels (psi, dpsi/dx,
    dpsi/dy) and P = (nx + 2*PAD) * (ny + 2*PAD) flattened nodes.
    """

    def __init__(self, basis: EigenBasis):
        g = basis.grid
        self.grid = g
        self.energies = basis.energies
        self.shape = (g.nx + 2 * PAD, g.ny + 2 * PAD)
        src, sign = ghost_map(g, PAD)
        m = len(basis)
        F = np.zeros((m,) + self.shape)
        ok = src >= 0
        F[:, ok] = basis.modes[:, src[ok]] * sign[ok]
        cube = np.zeros((m, 3) + self.shape)
        cube[:, 0] = F
        for k, c in enumerate(_D1):
            if c == 0.0:
                continue
            s = k - 2
            cube[:, 1, 2:-2, :] += c * F[:, 2 + s : self.shape[0] - 2 + s, :]
            cube[:, 2, :, 2:-2] += c * F[:, :, 2 + s : self.shape[1] - 2 + s]
        cube[:, 1:] /= g.h
        self.cube = cube.reshape(m, 3, -1)
        self.width = self.shape[1]

    def _stencil(self, x: float, y: float):
        g = self.grid
        fx = (x - g.x0) / g.h + PAD
        fy = (y - g.y0) / g.h + PAD
        i0 = int(math.floor(fx))
        j0 = int(math.floor(fy))
        if i0 < 3 or j0 < 3 or i0 > self.shape[0] - 5 or j0 > self.shape[1] - 5:
            raise ValueError(f"point ({x}, {y}) is outside the sampling grid")
        ii = np.arange(i0 - 1, i0 + 3)
        jj = np.arange(j0 - 1, j0 + 3)
        idx = (ii[:, None] * self.width + jj[None, :]).ravel()
        wx = _lagrange4(np.array(fx - i0))
        wy = _lagrange4(np.array(fy - j0))
        return idx, np.outer(wx, wy).ravel()

    def local(self, coeffs: np.ndarray, x: float, y: float) -> np.ndarray:
        """(phi, dphi/dx, dphi/dy) at one point for the given coefficients."""
        idx, w = self._stencil(x, y)
        vals = coeffs @ self.cube[:, :, idx].reshape(len(coeffs), -1)
        return vals.reshape(3, -1) @ w

    def grid_channels(self, coeffs: np.ndarray) -> np.ndarray:
        """(3,) + padded-shape array of phi and its gradient for coefficients."""
        return (coeffs @ self.cube.reshape(len(coeffs), -1)).reshape((3,) + self.shape)

    def quantum_potential_local(self, coeffs: np.ndarray, x: float, y: float, node_eps: float) -> float:
        idx, w = self._stencil(x, y)
        # 8x8 patch so every stencil node has its Laplacian neighbours
        i0, j0 = divmod(int(idx[0]), self.width)
        ii = np.arange(i0 - 2, i0 + 6)
        jj = np.arange(j0 - 2, j0 + 6)
        patch = (ii[:, None] * self.width + jj[None, :]).ravel()
        phi = (coeffs @ self.cube[:, 0, patch]).reshape(8, 8)
        R = np.abs(phi)
        lap = np.zeros((4, 4))
        for k, c in enumerate(_D2):
            lap += c * (R[k : k + 4, 2:6] + R[2:6, k : k + 4])
        lap /= self.grid.h**2
        Rc = R[2:6, 2:6]
        if np.any(Rc < node_eps):
            return float("nan")
        Q = -(HBAR**2) / (2 * MASS) * lap / Rc
        return float(Q.ravel() @ w)


def node_epsilon(state0: SpectralState, basis: EigenBasis, factor: float = 1e-6) -> float:
    """Threshold below which |phi| is treated as a node: factor * peak |phi(t=0)|."""
    return factor * float(np.abs(state0.coeffs @ basis.modes).max())


def guidance_velocity(phi: complex, grad_phi: np.ndarray) -> np.ndarray:
    """v = Im(grad(phi) / phi) * hbar / m."""
    return HBAR * np.imag(grad_phi / phi) / MASS


def sample_field(
    state: SpectralState, basis: EigenBasis, p, node_eps: float | None = None
) -> FieldSample:
    """Evaluate phi, grad(phi), R, S, velocity and Q at an off-grid point."""
    x, y = float(p[0]), float(p[1])
    if not bool(basis.domain.contains(x, y)):
        raise ValueError(f"point ({x}, {y}) is outside the domain")
    ev = basis.evaluator()
    phi, gx, gy = ev.local(state.coeffs, x, y)
    grad = np.array([gx, gy])
    eps = node_eps if node_eps is not None else 0.0
    R = abs(phi)
    near = R < eps or R == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        v = guidance_velocity(phi, grad)
    Q = ev.quantum_potential_local(state.coeffs, x, y, eps)
    return FieldSample(complex(phi), grad, float(R), float(np.angle(phi)), v, Q, near)


def grid_field(state: SpectralState, basis: EigenBasis) -> np.ndarray:
    """phi(t) on interior nodes."""
    return state.coeffs @ basis.modes


def density_snapshot(state: SpectralState, basis: EigenBasis) -> np.ndarray:
    """|phi|^2 on the full (nx, ny) grid, zero outside the domain."""
    return basis.grid.to_full(np.abs(grid_field(state, basis)) ** 2)


def quantum_potential_grid(state: SpectralState, basis: EigenBasis, node_eps: float) -> np.ndarray:
    """Q = -(1/2m) lap(R)/R on the full grid; NaN where R < node_eps or outside."""
    g = basis.grid
    src, sign = ghost_map(g, 2)
    phi = grid_field(state, basis)
    R = np.zeros(src.shape)
    ok = src >= 0
    R[ok] = np.abs(phi[src[ok]])
    lap = np.zeros((g.nx, g.ny))
    for k, c in enumerate(_D2):
        lap += c * (R[k : k + g.nx, 2:-2] + R[2:-2, k : k + g.ny])
    lap /= g.h**2
    Rc = R[2:-2, 2:-2]
    Q = np.full((g.nx, g.ny), np.nan)
    good = g.mask & (Rc >= node_eps)
    Q[good] = -(HBAR**2) / (2 * MASS) * lap[good] / Rc[good]
    return Q


def density_centroid(state: SpectralState, basis: EigenBasis) -> np.ndarray:
    return position_expectation(grid_field(state, basis), basis.grid)

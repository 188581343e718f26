"""Scar functions by dynamical averaging, and tube-localization diagnostics.

Averaging exp(i E_c t) phi(t) against a Gaussian time window is the same as
multiplying each spectral coefficient by a Gaussian in E_n - E_c, so the
scar is built directly from the coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Polyline, distance_to_polyline
from .packet import SpectralState
from .spectral import EigenBasis, GridSpec

# return time of the diagonal orbit at |P0| = 48: 2 * sqrt(5) / 96
DIAGONAL_PERIOD = 2.0 * math.sqrt(5.0) / 96.0


class EmptyWindowError(ValueError):
    pass


@dataclass(frozen=True)
class ScarSpec:
    """Gaussian energy window of standard deviation ``width`` around ``center_energy``.

    ``width=None`` means 2*pi / (n_periods * period): a time window of
    ``n_periods`` orbit periods.  ``width=inf`` keeps every coefficient.
    """

    center_energy: float = 2304.0
    width: float | None = None
    n_periods: float = 2.0
    period: float = DIAGONAL_PERIOD

    def __post_init__(self):
        if not self.resolved_width > 0:
            raise ValueError("energy window width must be positive")

    @property
    def resolved_width(self) -> float:
        if self.width is not None:
            return float(self.width)
        if not (self.n_periods > 0 and self.period > 0):
            raise ValueError("n_periods and period must be positive")
        return 2.0 * math.pi / (self.n_periods * self.period)

    def weights(self, energies: np.ndarray) -> np.ndarray:
        de = self.resolved_width
        if math.isinf(de):
            return np.ones_like(energies)
        return np.exp(-((energies - self.center_energy) ** 2) / (2.0 * de**2))


@dataclass(frozen=True, eq=False)
class ScarFunction:
    coeffs: np.ndarray
    energies: np.ndarray
    intensity: np.ndarray
    grid: GridSpec
    spec: ScarSpec

    @property
    def norm(self) -> float:
        return float(np.sum(self.intensity) * self.grid.h**2)


def build_scar(state0: SpectralState, basis: EigenBasis, spec: ScarSpec = ScarSpec()) -> ScarFunction:
    d = state0.coeffs * spec.weights(state0.energies)
    if not np.abs(d).max(initial=0.0) >= 1e-12:
        raise EmptyWindowError(
            f"no coefficient survives the window E_c={spec.center_energy:g}, "
            f"dE={spec.resolved_width:g}"
        )
    d = d / math.sqrt(float(np.sum(np.abs(d) ** 2)))
    intensity = basis.grid.to_full(np.abs(d @ basis.modes) ** 2)
    return ScarFunction(d, state0.energies, intensity, basis.grid, spec)


def tube_localization(intensity: np.ndarray, grid: GridSpec, polyline: Polyline | np.ndarray, width: float) -> float:
    """Mean density inside a tube of half-width ``width`` over mean density outside it.

    Areas are counted in grid cells, so a uniform intensity gives exactly 1.
    """
    if not width > 0:
        raise ValueError("tube width must be positive")
    pts = polyline.points if isinstance(polyline, Polyline) else np.asarray(polyline)
    X, Y = grid.mesh()
    inside = grid.mask & (distance_to_polyline(pts, X, Y) <= width)
    outside = grid.mask & ~inside
    if not outside.any():
        raise ValueError("tube covers the whole domain")
    if not inside.any():
        raise ValueError("tube contains no grid nodes")
    return float(intensity[inside].mean() / intensity[outside].mean())


def overlap(a: ScarFunction, b: ScarFunction) -> float:
    """|<a|b>| from the (orthonormal) spectral coefficients."""
    if a.coeffs.shape != b.coeffs.shape:
        raise ValueError("scar functions come from different bases")
    return float(abs(np.vdot(a.coeffs, b.coeffs)))

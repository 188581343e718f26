"""Quantum trajectory ensembles under the guidance equation m dr/dt = Im(grad(phi)/phi)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .geometry import Domain
from .packet import MASS, SpectralState, guidance_velocity, node_epsilon
from .spectral import EigenBasis

log = logging.getLogger(__name__)

DEFAULT_RADII = (0.00333, 0.0333, 0.05, 0.1)
PANEL_CUTS = (0.012, 0.023, 0.034, 0.045, 0.056, 0.07, 0.085, 0.1)

STATUS_ORDER = ("ok", "near-node-visited", "left-domain", "step-failure")
MIN_STEP_FRACTION = 1e-12

# field(t, (x, y)) -> (phi, dphi/dx, dphi/dy)
FieldFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EnsembleSpec:
    count: int = 80
    radii: tuple[float, ...] = DEFAULT_RADII
    per_ring: tuple[int, ...] | None = None
    center: tuple[float, float] = (1.0, 0.5)
    seed: int = 0

    def ring_counts(self) -> tuple[int, ...]:
        if self.per_ring is not None:
            if sum(self.per_ring) != self.count or len(self.per_ring) != len(self.radii):
                raise ValueError("per_ring must have one entry per radius and sum to count")
            return tuple(self.per_ring)
        base, extra = divmod(self.count, len(self.radii))
        return tuple(base + (1 if k < extra else 0) for k in range(len(self.radii)))


def sample_initial(spec: EnsembleSpec, domain: Domain) -> np.ndarray:
    """Points spaced uniformly in angle on each ring; phases drawn from the seed."""
    x0, y0 = spec.center
    room = domain.distance_to_boundary(x0, y0)
    rng = np.random.default_rng(spec.seed)
    pts = []
    for r, n in zip(spec.radii, spec.ring_counts()):
        if r >= room:
            raise ValueError(f"ring of radius {r} around {spec.center} crosses the boundary")
        if r == 0:
            pts.extend([(x0, y0)] * n)
            continue
        phase = rng.uniform(0.0, 2 * math.pi / n)
        ang = 2 * math.pi * np.arange(n) / n + phase
        pts.extend(zip(x0 + r * np.cos(ang), y0 + r * np.sin(ang)))
    return np.array(pts, dtype=float)


@dataclass
class Trajectory:
    """Samples on the shared output mesh; ``p = MASS * v`` is the Bohmian momentum grad(S)."""

    id: int
    t: np.ndarray
    xy: np.ndarray
    v: np.ndarray
    status: str = "ok"
    t_stop: float | None = None
    min_amplitude: float = math.inf

    @property
    def p(self) -> np.ndarray:
        return MASS * self.v


@dataclass
class TrajectoryEnsemble:
    spec: EnsembleSpec | None
    trajectories: list[Trajectory]
    mesh: np.ndarray
    tol: tuple[float, float] = (1e-8, 1e-8)
    method: str = "LSODA"

    def __len__(self) -> int:
        return len(self.trajectories)

    def positions(self) -> np.ndarray:
        """(N, T, 2) positions; NaN past a trajectory's truncation."""
        return self._stack("xy")

    def momenta(self) -> np.ndarray:
        return MASS * self._stack("v")

    def valid(self) -> np.ndarray:
        """(N, T) mask of mesh samples each trajectory actually reached."""
        out = np.zeros((len(self), len(self.mesh)), dtype=bool)
        for k, tr in enumerate(self.trajectories):
            out[k, : len(tr.t)] = True
        return out

    def _stack(self, attr: str) -> np.ndarray:
        out = np.full((len(self), len(self.mesh), 2), np.nan)
        for k, tr in enumerate(self.trajectories):
            a = getattr(tr, attr)
            out[k, : len(a)] = a
        return out

    def statuses(self) -> list[str]:
        return [tr.status for tr in self.trajectories]


def output_mesh(t_end: float, dt_out: float) -> np.ndarray:
    n = int(round(t_end / dt_out))
    if n < 1 or abs(n * dt_out - t_end) > 1e-9 * t_end:
        raise ValueError(f"t_end={t_end} must be a positive multiple of dt_out={dt_out}")
    return dt_out * np.arange(n + 1)


class SpectralGuidance:
    """Field callable for the exactly evolved spectral state (phases recomputed per call)."""

    def __init__(self, state0: SpectralState, basis: EigenBasis):
        self.c0 = state0.coeffs
        self.energies = state0.energies
        self.t0 = state0.t
        self.ev = basis.evaluator()

    def __call__(self, t: float, p: np.ndarray) -> np.ndarray:
        ct = self.c0 * np.exp(-1j * self.energies * (t - self.t0))
        return self.ev.local(ct, p[0], p[1])


def integrate_trajectory(
    field_fn: FieldFn,
    p0: Sequence[float],
    mesh: np.ndarray,
    tol: tuple[float, float] = (1e-8, 1e-8),
    method: str = "LSODA",
    domain: Domain | None = None,
    node_eps: float = 0.0,
    traj_id: int = 0,
    retry: bool = True,
) -> Trajectory:
    """Integrate one trajectory with adaptive stepping and report it on ``mesh``."""
    atol, rtol = tol
    tracker = {"min": math.inf, "outside": False}

    def rhs(t, y):
        try:
            phi, gx, gy = field_fn(t, y)
        except ValueError:
            # beyond the sampling grid; sample check below flags the exit
            tracker["outside"] = True
            return np.zeros(2)
        a = abs(phi)
        tracker["min"] = min(tracker["min"], a)
        if a == 0.0:
            return np.zeros(2)
        return guidance_velocity(phi, np.array([gx, gy]))

    opts = {}
    if method == "LSODA":
        # without a floor LSODA can creep towards a singularity indefinitely
        opts["min_step"] = MIN_STEP_FRACTION * (mesh[-1] - mesh[0])
    sol = solve_ivp(
        rhs, (mesh[0], mesh[-1]), np.asarray(p0, dtype=float), method=method,
        t_eval=mesh, rtol=rtol, atol=atol, **opts,
    )
    n = len(sol.t)
    xy = sol.y.T.copy()
    status = "ok"
    t_stop = None
    if sol.status < 0:
        status = "step-failure"
        t_stop = float(sol.t[-1]) if n else float(mesh[0])
        log.warning("trajectory %d: %s at t=%s", traj_id, sol.message, t_stop)
    if domain is not None:
        inside = domain.contains(xy[:, 0], xy[:, 1])
        if not inside.all():
            k = int(np.argmin(inside))
            if retry and k > 0:
                # one retry from the last good sample with a tighter tolerance
                tail = integrate_trajectory(
                    field_fn, xy[k - 1], mesh[k - 1 :], (atol / 100, rtol / 100), method,
                    domain, node_eps, traj_id, retry=False,
                )
                xy = np.vstack([xy[: k - 1], tail.xy])
                tracker["min"] = min(tracker["min"], tail.min_amplitude)
                n = len(xy)
                if tail.status in ("left-domain", "step-failure"):
                    status, t_stop = tail.status, tail.t_stop
            else:
                xy = xy[:k]
                n = k
                status = "left-domain"
                t_stop = float(mesh[k])
    t = mesh[:n]
    v = np.empty((n, 2))
    for k in range(n):
        phi, gx, gy = field_fn(t[k], xy[k])
        v[k] = guidance_velocity(phi, np.array([gx, gy])) if phi != 0 else 0.0
    if status == "ok" and tracker["min"] < node_eps:
        status = "near-node-visited"
    return Trajectory(traj_id, t, xy, v, status, t_stop, tracker["min"])


def integrate_ensemble(
    points: np.ndarray,
    state0: SpectralState,
    basis: EigenBasis,
    t_end: float = 0.1,
    tol: tuple[float, float] = (1e-8, 1e-8),
    dt_out: float = 2.5e-4,
    method: str = "LSODA",
    spec: EnsembleSpec | None = None,
    progress: Callable[[int, Trajectory], None] | None = None,
) -> TrajectoryEnsemble:
    """Integrate every starting point along the exactly evolved wave function."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    domain = basis.domain
    pts = np.asarray(points, dtype=float)
    if not domain.interior(pts[:, 0], pts[:, 1]).all():
        raise ValueError("all starting points must lie inside the domain")
    mesh = output_mesh(t_end, dt_out)
    guide = SpectralGuidance(state0, basis)
    eps = node_epsilon(state0, basis)
    out = []
    for k, p0 in enumerate(pts):
        tr = integrate_trajectory(guide, p0, mesh, tol, method, domain, eps, k)
        out.append(tr)
        if progress is not None:
            progress(k, tr)
    return TrajectoryEnsemble(spec, out, mesh, tol, method)


@dataclass
class Panel:
    t_lo: float
    t_hi: float
    paths: list[np.ndarray] = field(default_factory=list)
    times: list[np.ndarray] = field(default_factory=list)


def segment_panels(ensemble: TrajectoryEnsemble, cut_times: Sequence[float]) -> list[Panel]:
    """Split every path into consecutive time intervals ending at ``cut_times``.

    Adjacent panels share their boundary sample, so dropping the first point
    of each later panel and concatenating gives back the full path.
    """
    mesh = ensemble.mesh
    cuts = [float(c) for c in cut_times]
    if any(b < a for a, b in zip(cuts[:-1], cuts[1:])):
        raise ValueError("cut times must be ascending")
    if cuts and (cuts[0] < mesh[0] - 1e-12 or cuts[-1] > mesh[-1] + 1e-12):
        raise ValueError("cut times must lie within the output mesh")
    bounds = [float(mesh[0])] + cuts
    if not cuts or cuts[-1] < mesh[-1] - 1e-12:
        bounds.append(float(mesh[-1]))
    tol = 1e-9 * max(1.0, float(mesh[-1]))
    panels = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        panel = Panel(lo, hi)
        for tr in ensemble.trajectories:
            sel = (tr.t >= lo - tol) & (tr.t <= hi + tol)
            panel.paths.append(tr.xy[sel])
            panel.times.append(tr.t[sel])
        panels.append(panel)
    return panels


# ---------------------------------------------------------------------------
# free-space oracle


@dataclass(frozen=True)
class FreeGaussian:
    """Freely spreading Gaussian exp(-alpha r^2 + i P.r) for H = -laplacian.

    The width parameter evolves as a(t) = alpha / (1 + 4 i alpha t), so the
    density width grows by s(t)/s(0) = sqrt(1 + 16 alpha^2 t^2).
    """

    alpha: float = 30.68
    center: tuple[float, float] = (0.0, 0.0)
    momentum: tuple[float, float] = (0.0, 0.0)

    @property
    def spreading_time(self) -> float:
        return 1.0 / (4.0 * self.alpha)

    def width_ratio(self, t) -> np.ndarray:
        return np.sqrt(1.0 + 16.0 * self.alpha**2 * np.asarray(t) ** 2)

    def __call__(self, t: float, p: np.ndarray) -> np.ndarray:
        a = self.alpha / (1.0 + 4j * self.alpha * t)
        P = np.asarray(self.momentum)
        # centre moves at 2P (mass 1/2); phase terms irrelevant to the velocity are dropped
        c = np.asarray(self.center) + 2.0 * P * t
        d = np.asarray(p) - c
        phi = np.exp(-a * (d @ d) + 1j * (P @ np.asarray(p)))
        grad = (-2.0 * a * d + 1j * P) * phi
        return np.array([phi, grad[0], grad[1]])

    def exact(self, p0: Sequence[float], t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        c0 = np.asarray(self.center)
        off = np.asarray(p0) - c0
        return c0 + 2.0 * np.outer(t, self.momentum) + np.outer(self.width_ratio(t), off)


# ---------------------------------------------------------------------------
# export


def write_ensemble_csv(ensemble: TrajectoryEnsemble, path: str | Path, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["id", "t", "x", "y", "px", "py", "status"])
        for tr in ensemble.trajectories:
            p = tr.p
            for k in range(len(tr.t)):
                w.writerow([tr.id, repr(float(tr.t[k])), repr(float(tr.xy[k, 0])),
                            repr(float(tr.xy[k, 1])), repr(float(p[k, 0])),
                            repr(float(p[k, 1])), tr.status])


def write_panel_csv(panel: Panel, path: str | Path, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["id", "t", "x", "y"])
        for k, (ts, xy) in enumerate(zip(panel.times, panel.paths)):
            for t, (x, y) in zip(ts, xy):
                w.writerow([k, repr(float(t)), repr(float(x)), repr(float(y))])

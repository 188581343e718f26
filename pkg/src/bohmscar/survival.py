"""Exact survival probability, the trajectory-kernel estimate, peaks and contributors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks as _scipy_find_peaks

from .bohm import TrajectoryEnsemble
from .geometry import distance_to_polyline
from .packet import SpectralState

DEFAULT_SIGMA = 156.25


@dataclass
class SurvivalSeries:
    times: np.ndarray
    s_exact: np.ndarray | None = None
    s_approx: np.ndarray | None = None
    sigma: float = DEFAULT_SIGMA
    n_traj: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def s_approx_rescaled(self) -> np.ndarray | None:
        if self.s_approx is None:
            return None
        return self.s_approx / self.s_approx[0]


def survival_exact(state0: SpectralState, times: np.ndarray) -> np.ndarray:
    """S(t) = |sum |c_n|^2 exp(-i E_n t)|^2 / (sum |c_n|^2)^2."""
    w = np.abs(state0.coeffs) ** 2
    total = w.sum()
    if total == 0:
        raise ValueError("state has zero norm")
    times = np.asarray(times, dtype=float)
    out = np.empty(len(times))
    # chunked to bound memory for long meshes
    for k in range(0, len(times), 2048):
        tt = times[k : k + 2048]
        amp = np.exp(-1j * np.outer(tt, state0.energies)) @ w
        out[k : k + 2048] = np.abs(amp) ** 2
    return out / total**2


def pair_terms(ensemble: TrajectoryEnsemble, sigma: float, k: int) -> np.ndarray:
    """(N, N) kernel values between trajectories i at mesh index k and j at t = 0.

    Trajectories truncated before index ``k`` give zero rows.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X = ensemble.positions()
    P = ensemble.momenta()
    r_t, p_t = X[:, k], P[:, k]
    r_0, p_0 = X[:, 0], P[:, 0]
    d_r = r_t[:, None, :] - r_0[None, :, :]
    d_p = p_t[:, None, :] - p_0[None, :, :]
    expo = -sigma * np.sum(d_r**2, axis=-1) - np.sum(d_p**2, axis=-1) / sigma
    terms = np.exp(expo)
    terms[np.isnan(terms)] = 0.0
    return terms


def contributions(ensemble: TrajectoryEnsemble, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """(N, T) per-trajectory share C_i(t) = N^-1 sum_j term_ij(t); sum over i is S_approx."""
    n = len(ensemble)
    out = np.empty((n, len(ensemble.mesh)))
    for k in range(len(ensemble.mesh)):
        out[:, k] = pair_terms(ensemble, sigma, k).sum(axis=1) / n
    return out


def survival_approx(ensemble: TrajectoryEnsemble, sigma: float = DEFAULT_SIGMA) -> SurvivalSeries:
    """Gaussian-smoothed trajectory estimate of S(t), with the printed N^-1 prefactor."""
    C = contributions(ensemble, sigma)
    s = C.sum(axis=0)
    valid = ensemble.valid()
    truncated = [
        {"id": tr.id, "status": tr.status, "t_stop": tr.t_stop}
        for tr in ensemble.trajectories
        if not valid[tr.id].all()
    ]
    affected_from = min((float(ensemble.mesh[valid[d["id"]].sum()]) for d in truncated), default=None)
    meta = {
        "normalization": "raw: N^-1 sum_ij; rescaled: raw / raw(t=0)",
        "raw_at_t0": float(s[0]),
        "truncated_trajectories": truncated,
        "affected_from_t": affected_from,
    }
    return SurvivalSeries(ensemble.mesh.copy(), None, s, sigma, len(ensemble), meta)


# ---------------------------------------------------------------------------
# peaks


@dataclass
class Peak:
    t: float
    height: float
    prominence: float
    label: str | None = None
    index: int = -1


@dataclass
class PeakReport:
    peaks: list[Peak]
    reference: float = 0.0

    def labeled(self, label: str) -> list[Peak]:
        return [p for p in self.peaks if p.label == label]

    def main(self) -> list[Peak]:
        return [p for p in self.peaks if p.label in ("a", "b", "c")]

    def first(self, label: str) -> Peak | None:
        got = self.labeled(label)
        return got[0] if got else None


def _refine(t: np.ndarray, s: np.ndarray, i: int) -> tuple[float, float]:
    """Quadratic sub-sample refinement of a discrete maximum."""
    if i <= 0 or i >= len(s) - 1:
        return float(t[i]), float(s[i])
    y0, y1, y2 = s[i - 1], s[i], s[i + 1]
    den = y0 - 2 * y1 + y2
    if den >= 0:
        return float(t[i]), float(y1)
    off = 0.5 * (y0 - y2) / den
    dt = t[i + 1] - t[i]
    return float(t[i] + off * dt), float(y1 - 0.25 * (y0 - y2) * off)


def _slope_shoulders(t, s, lo, hi, threshold, taken=()) -> list[Peak]:
    """Inflection shoulders on a rising edge: dips of dS/dt between two slope maxima.

    The prominence of a dip is the height deficit it causes, i.e. the integral
    of (linear bridge between the flanking slope maxima - dS/dt).  Dips whose
    bracket contains an index in ``taken`` are already reported as maxima.
    """
    if hi - lo < 4:
        return []
    d = np.gradient(s[lo : hi + 1], t[lo : hi + 1])
    tt = t[lo : hi + 1]
    mx, _ = _scipy_find_peaks(d)
    mn, _ = _scipy_find_peaks(-d)
    out = []
    for m in mn:
        left = mx[mx < m]
        right = mx[mx > m]
        if not len(left) or not len(right):
            continue
        a, b = left[-1], right[0]
        if any(lo + a <= k <= lo + b for k in taken):
            continue
        bridge = np.interp(tt[a : b + 1], [tt[a], tt[b]], [d[a], d[b]])
        deficit = float(np.trapezoid(np.clip(bridge - d[a : b + 1], 0, None), tt[a : b + 1]))
        if deficit >= threshold:
            # a dip that turns negative sits past a small maximum; report where S' crosses zero
            k = m if d[m] > 0 else a + int(np.argmax(d[a : m + 1] <= 0))
            out.append(Peak(float(tt[k]), float(s[lo + k]), deficit, "shoulder", lo + k))
    return out


def find_peaks(
    times: np.ndarray,
    series: np.ndarray,
    prominence: float = 0.02,
    main_fraction: float = 0.1,
    period: float | None = None,
    split_times: Sequence[float] | None = None,
) -> PeakReport:
    """Locate and label recurrence peaks.

    Thresholds are fractions of the tallest interior local maximum.  Without
    ``split_times`` each recurrence window's tallest maximum is a main peak
    (first window "a", second "c").  With ``split_times`` (e.g. the exact peak
    times) the first window yields "a" before the split and "b" after it, as
    for the trajectory estimate.  Shoulders are secondary maxima or slope dips
    on the leading edge of a main peak.
    """
    t = np.asarray(times, dtype=float)
    s = np.asarray(series, dtype=float)
    idx, props = _scipy_find_peaks(s, prominence=0.0)
    if len(idx) == 0:
        return PeakReport([], 0.0)
    ref = float(s[idx].max())
    if ref <= 0 or np.ptp(s) == 0:
        return PeakReport([], 0.0)
    thr = prominence * ref
    keep = props["prominences"] >= thr
    idx, prom = idx[keep], props["prominences"][keep]
    peaks = []
    for i, p in zip(idx, prom):
        tp, hp = _refine(t, s, i)
        peaks.append(Peak(tp, hp, float(p), None, int(i)))

    if period is None:
        big = [p for p in peaks if p.prominence >= main_fraction * ref]
        period = big[0].t if big else t[-1]
    windows = [((k - 0.5) * period, (k + 0.5) * period) for k in (1, 2)]
    labels = ("a", "c")
    for w, (lo, hi) in enumerate(windows):
        cand = [p for p in peaks if lo <= p.t < hi and p.prominence >= main_fraction * ref]
        if not cand:
            continue
        if split_times is not None and w == 0 and len(split_times) > 0:
            ts = split_times[0]
            early = [p for p in cand if p.t <= ts]
            late = [p for p in cand if p.t > ts]
            if early:
                max(early, key=lambda p: p.height).label = "a"
            if late:
                max(late, key=lambda p: p.height).label = "b"
        else:
            max(cand, key=lambda p: p.height).label = labels[w]

    shoulders = []
    for main in [p for p in peaks if p.label in ("a", "c")]:
        # leading edge: from the preceding deep minimum (below 5% of the peak) up to the peak
        i = main.index
        j = i
        while j > 0 and s[j] > 0.05 * s[i]:
            j -= 1
        taken = []
        for p in peaks:
            if p.label is None and j <= p.index < i:
                p.label = "shoulder"
                taken.append(p.index)
        shoulders += _slope_shoulders(t, s, j, i, thr, taken)
    peaks += shoulders
    peaks.sort(key=lambda p: p.t)
    return PeakReport(peaks, ref)


def window_peak(times: np.ndarray, series: np.ndarray, lo: float, hi: float) -> tuple[float, float]:
    """Time and value of the largest sample of ``series`` in [lo, hi]."""
    sel = np.nonzero((times >= lo) & (times <= hi))[0]
    i = sel[np.argmax(series[sel])]
    return _refine(times, series, int(i))


# ---------------------------------------------------------------------------
# contributors


@dataclass
class Contributor:
    id: int
    contribution: float


def top_contributors(
    ensemble: TrajectoryEnsemble,
    sigma: float = DEFAULT_SIGMA,
    t_window: float | tuple[float, float] = 0.047,
    C: np.ndarray | None = None,
) -> tuple[float, list[Contributor]]:
    """Rank trajectories by their share of S_approx at a peak time.

    ``t_window`` is either a mesh time or an interval whose S_approx maximum
    is used.  Returns the time used and all trajectories ranked descending.
    """
    if C is None:
        C = contributions(ensemble, sigma)
    mesh = ensemble.mesh
    if isinstance(t_window, tuple):
        lo, hi = t_window
        sel = np.nonzero((mesh >= lo - 1e-12) & (mesh <= hi + 1e-12))[0]
        if len(sel) == 0:
            raise ValueError("t_window does not overlap the mesh")
        k = int(sel[np.argmax(C[:, sel].sum(axis=0))])
    else:
        k = int(np.argmin(np.abs(mesh - t_window)))
        if abs(mesh[k] - t_window) > 0.5 * (mesh[1] - mesh[0]) + 1e-12:
            raise ValueError("t_window is outside the mesh")
    order = np.argsort(-C[:, k], kind="stable")
    ranked = [Contributor(int(ensemble.trajectories[i].id), float(C[i, k])) for i in order]
    return float(mesh[k]), ranked


def mean_path_distance(ensemble: TrajectoryEnsemble, polyline: np.ndarray, t_hi: float) -> np.ndarray:
    """Per trajectory, mean distance to ``polyline`` over mesh samples with t <= t_hi."""
    X = ensemble.positions()
    k = int(np.searchsorted(ensemble.mesh, t_hi + 1e-12))
    d = distance_to_polyline(polyline, X[:, :k, 0], X[:, :k, 1])
    return np.nanmean(d, axis=1)


def arrival_times(C: np.ndarray, mesh: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Per trajectory, time of its largest self-overlap contribution in [lo, hi]."""
    sel = np.nonzero((mesh >= lo) & (mesh <= hi))[0]
    return mesh[sel[np.argmax(C[:, sel], axis=1)]]


# ---------------------------------------------------------------------------
# export


def write_survival_csv(series: SurvivalSeries, path: str | Path, header: Sequence[str] = ()) -> None:
    n = len(series.times)
    ex = series.s_exact if series.s_exact is not None else [float("nan")] * n
    ap = series.s_approx if series.s_approx is not None else [float("nan")] * n
    rs = series.s_approx_rescaled if series.s_approx is not None else [float("nan")] * n
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["t", "s_exact", "s_approx", "s_approx_rescaled"])
        for row in zip(series.times, ex, ap, rs):
            w.writerow([repr(float(v)) for v in row])


def write_peaks_csv(reports: dict[str, PeakReport], path: str | Path, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["series", "t_peak", "height", "prominence", "label"])
        for name, rep in reports.items():
            for p in rep.peaks:
                w.writerow([name, repr(p.t), repr(p.height), repr(p.prominence), p.label or ""])


def format_report(name: str, rep: PeakReport) -> str:
    lines = [f"{name}: {len(rep.peaks)} features (reference height {rep.reference:.6g})"]
    for p in rep.peaks:
        lines.append(f"  t={p.t:.5f}  S={p.height:.6g}  prominence={p.prominence:.3g}  {p.label or '-'}")
    return "\n".join(lines)

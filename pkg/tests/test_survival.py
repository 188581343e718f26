import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmscar.bohm import Trajectory, TrajectoryEnsemble
from bohmscar.packet import SpectralState
from bohmscar.survival import (
    PeakReport,
    SurvivalSeries,
    arrival_times,
    contributions,
    find_peaks,
    format_report,
    mean_path_distance,
    survival_approx,
    survival_exact,
    top_contributors,
    window_peak,
    write_peaks_csv,
    write_survival_csv,
)

T = 2 * math.sqrt(5) / 96


def _windowed_average(w, E, L):
    d = (E[:, None] - E[None, :]) * L
    return float(w @ np.sinc(d / np.pi) @ w)


def test_exact_starts_at_one(state0):
    s = survival_exact(state0, np.array([0.0, 0.01]))
    assert s[0] == pytest.approx(1.0, abs=1e-9)
    assert s[1] < 1.0


@settings(max_examples=30, deadline=None)
@given(
    c=st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False), min_size=1, max_size=30),
    seed=st.integers(0, 1000),
)
def test_exact_bounded(c, seed):
    c = np.array(c)
    if np.sum(np.abs(c) ** 2) < 1e-6:
        return
    E = np.sort(np.random.default_rng(seed).uniform(0, 5000, len(c)))
    s = survival_exact(SpectralState(c, E), np.linspace(0, 0.2, 101))
    assert np.all(s >= 0) and np.all(s <= 1 + 1e-9)
    assert s[0] == pytest.approx(1.0, abs=1e-9)


def test_single_mode_survives():
    s = survival_exact(SpectralState(np.array([0.3 + 0.4j]), np.array([1234.5])), np.linspace(0, 1, 50))
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_time_average_matches_closed_form(state0):
    w = np.abs(state0.coeffs) ** 2
    w /= w.sum()
    L = 50 * T
    s = survival_exact(state0, np.linspace(0, L, 40001))
    assert s.mean() == pytest.approx(_windowed_average(w, state0.energies, L), rel=2e-3)


def test_time_average_tends_to_participation_ratio(state0):
    w = np.abs(state0.coeffs) ** 2
    w /= w.sum()
    ipr = float(np.sum(w**2))
    assert _windowed_average(w, state0.energies, 5000 * T) == pytest.approx(ipr, rel=0.02)


def _ensemble(xy0, p0, xy1=None, p1=None):
    """Two-sample ensemble (t = 0 and t = 1) from position/momentum arrays."""
    xy1 = xy0 if xy1 is None else xy1
    p1 = p0 if p1 is None else p1
    mesh = np.array([0.0, 1.0])
    trs = [
        Trajectory(k, mesh.copy(), np.array([xy0[k], xy1[k]]), 2.0 * np.array([p0[k], p1[k]]))
        for k in range(len(xy0))
    ]
    return TrajectoryEnsemble(None, trs, mesh)


def test_single_frozen_trajectory_gives_one():
    ens = _ensemble(np.array([[1.0, 0.5]]), np.array([[40.0, -20.0]]))
    s = survival_approx(ens)
    np.testing.assert_allclose(s.s_approx, 1.0)
    np.testing.assert_allclose(s.s_approx_rescaled, 1.0)


def test_frozen_diagonal_terms_are_one():
    # widely separated trajectories: only i = j pairs survive, each equal to 1
    xy = np.array([[0.2, 0.5], [1.0, 0.5], [1.8, 0.3]])
    p = np.array([[10.0, 0.0], [-30.0, 5.0], [0.0, 40.0]])
    C = contributions(_ensemble(xy, p))
    np.testing.assert_allclose(C * 3, 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_estimator_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 7
    xy0, xy1 = rng.uniform(0, 1, (n, 2)), rng.uniform(0, 1, (n, 2))
    p0, p1 = rng.normal(0, 10, (n, 2)), rng.normal(0, 10, (n, 2))
    a = survival_approx(_ensemble(xy0, p0, xy1, p1)).s_approx
    perm = rng.permutation(n)
    b = survival_approx(_ensemble(xy0[perm], p0[perm], xy1[perm], p1[perm])).s_approx
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_small_sigma_limit():
    rng = np.random.default_rng(0)
    xy0, xy1 = rng.uniform(0, 1, (5, 2)), rng.uniform(0, 1, (5, 2))
    p0, p1 = rng.normal(0, 40, (5, 2)), rng.normal(0, 40, (5, 2))
    s = survival_approx(_ensemble(xy0, p0, xy1, p1), sigma=1e-6).s_approx
    assert s[1] < 1e-100
    with pytest.raises(ValueError):
        survival_approx(_ensemble(xy0, p0), sigma=0.0)


def test_contributions_partition(rng):
    xy0, xy1 = rng.uniform(0, 0.2, (6, 2)), rng.uniform(0, 0.2, (6, 2))
    p0, p1 = rng.normal(0, 5, (6, 2)), rng.normal(0, 5, (6, 2))
    ens = _ensemble(xy0, p0, xy1, p1)
    series = survival_approx(ens)
    t, ranked = top_contributors(ens, t_window=1.0)
    assert t == 1.0
    assert sum(c.contribution for c in ranked) == pytest.approx(series.s_approx[1], abs=1e-12)
    assert all(a.contribution >= b.contribution for a, b in zip(ranked, ranked[1:]))
    with pytest.raises(ValueError):
        top_contributors(ens, t_window=5.0)
    with pytest.raises(ValueError):
        top_contributors(ens, t_window=(3.0, 4.0))


def test_truncated_trajectories_flagged():
    mesh = np.linspace(0, 1, 5)
    good = Trajectory(0, mesh, np.zeros((5, 2)) + 0.5, np.zeros((5, 2)))
    bad = Trajectory(1, mesh[:3], np.zeros((3, 2)) + 0.5, np.zeros((3, 2)), "step-failure", 0.5)
    s = survival_approx(TrajectoryEnsemble(None, [good, bad], mesh))
    assert np.all(np.isfinite(s.s_approx))
    assert s.meta["affected_from_t"] == pytest.approx(0.75)
    assert s.meta["truncated_trajectories"][0]["status"] == "step-failure"
    # the truncated trajectory stops contributing
    assert s.s_approx[-1] == pytest.approx(1.0)
    assert s.s_approx[0] == pytest.approx(2.0)


def _bump(t, t0, w, h):
    return h * np.exp(-((t - t0) / w) ** 2)


def test_constant_series_has_no_peaks():
    t = np.linspace(0, 0.1, 401)
    assert find_peaks(t, np.full_like(t, 0.3)).peaks == []
    assert find_peaks(t, np.zeros_like(t)).peaks == []


def test_peak_refinement_is_subsample():
    t = np.linspace(0, 1, 21)
    s = 1 - (t - 0.4321) ** 2
    rep = find_peaks(np.r_[t, 1.05], np.r_[s, 0.0])
    assert rep.peaks[0].t == pytest.approx(0.4321, abs=1e-9)


def test_synthetic_recurrences_labelled():
    t = np.linspace(0, 0.1, 401)
    s = (
        _bump(t, 0.0, 0.003, 1.0)
        + _bump(t, 0.047, 0.002, 0.09)
        + _bump(t, 0.094, 0.002, 0.035)
        + _bump(t, 0.0895, 0.0012, 0.012)
    )
    rep = find_peaks(t, s, prominence=0.02)
    assert [p.t for p in rep.peaks] == sorted(p.t for p in rep.peaks)
    a, c = rep.first("a"), rep.first("c")
    assert a.t == pytest.approx(0.047, abs=3e-4)
    assert c.t == pytest.approx(0.094, abs=3e-4)
    sh = rep.labeled("shoulder")
    assert sh and all(0.085 < p.t < c.t for p in sh)
    assert all(p.prominence >= 0.02 * rep.reference for p in rep.peaks)
    assert isinstance(format_report("x", rep), str)


@pytest.mark.parametrize(
    "sep, height, has_max",
    [(0.0025, 0.01, False), (0.003, 0.015, True)],
)
def test_shoulder_without_prominent_maximum(sep, height, has_max):
    # an inflection, or a maximum too shallow to count, on the rising edge
    t = np.linspace(0, 0.1, 801)
    s = _bump(t, 0.047, 0.002, 0.09) + _bump(t, 0.094, 0.0018, 0.03) + _bump(t, 0.094 - sep, 0.0013, height)
    from scipy.signal import find_peaks as raw

    idx, _ = raw(s)
    assert (len(idx) == 3) is has_max
    rep = find_peaks(t, s, prominence=0.02)
    sh = rep.labeled("shoulder")
    assert len(sh) == 1 and 0.088 < sh[0].t < rep.first("c").t


def test_no_shoulder_on_clean_edge():
    t = np.linspace(0, 0.1, 801)
    s = _bump(t, 0.047, 0.002, 0.09) + _bump(t, 0.094, 0.0018, 0.03)
    assert not find_peaks(t, s).labeled("shoulder")


def test_split_labels_a_and_b():
    t = np.linspace(0, 0.1, 401)
    s = _bump(t, 0.0, 0.003, 1.0) + _bump(t, 0.043, 0.001, 0.05) + _bump(t, 0.049, 0.001, 0.03)
    s += _bump(t, 0.093, 0.001, 0.02)
    rep = find_peaks(t, s, prominence=0.02, period=0.046, split_times=[0.046])
    assert rep.first("a").t == pytest.approx(0.043, abs=3e-4)
    assert rep.first("b").t == pytest.approx(0.049, abs=3e-4)
    assert rep.first("c").t == pytest.approx(0.093, abs=3e-4)


def test_window_peak():
    t = np.linspace(0, 1, 101)
    s = np.sin(3 * t)
    tp, sp = window_peak(t, s, 0.2, 0.9)
    assert tp == pytest.approx(math.pi / 6, abs=1e-3)


def test_path_metrics():
    mesh = np.linspace(0, 1, 5)
    trs = [
        Trajectory(0, mesh, np.column_stack([mesh, 0 * mesh]), np.zeros((5, 2))),
        Trajectory(1, mesh, np.column_stack([mesh, 0 * mesh + 0.3]), np.zeros((5, 2))),
    ]
    ens = TrajectoryEnsemble(None, trs, mesh)
    chord = np.array([[0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(mean_path_distance(ens, chord, 0.5), [0.0, 0.3])
    C = np.array([[0, 1, 5, 2, 0], [0, 0, 1, 3, 9]], dtype=float)
    np.testing.assert_allclose(arrival_times(C, mesh, 0.0, 0.8), [0.5, 0.75])


def test_csv_exports(tmp_path):
    t = np.array([0.0, 0.1])
    series = SurvivalSeries(t, np.array([1.0, 0.25]), np.array([3.0, 1.0]))
    write_survival_csv(series, tmp_path / "s.csv", ["provenance"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# provenance"
    assert lines[1] == "t,s_exact,s_approx,s_approx_rescaled"
    assert [float(v) for v in lines[3].split(",")] == [0.1, 0.25, 1.0, 1 / 3]
    write_peaks_csv({"exact": PeakReport([])}, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().startswith("series,")

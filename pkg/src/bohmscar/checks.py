"""Oracle suites and the reproduction checklist printed by ``reproduce-paper``."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .bohm import FreeGaussian, integrate_trajectory
from .geometry import Rectangle, diagonal_po, domain_from_params
from .packet import MASS
from .pipeline import classical_ray
from .spectral import build_grid, solve_eigen, weyl_count
from .survival import survival_exact


@dataclass
class Check:
    number: int
    name: str
    passed: bool | None
    detail: str

    @property
    def verdict(self) -> str:
        return {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]


def format_checklist(checks: list[Check]) -> str:
    return "\n".join(f"[{c.verdict}] {c.number:2d}. {c.name}: {c.detail}" for c in checks)


def square_levels(count: int) -> np.ndarray:
    """Lowest ``count`` Dirichlet levels pi^2 (m^2 + n^2) of the unit square."""
    m = int(math.isqrt(count)) + 3
    vals = sorted(math.pi**2 * (a * a + b * b) for a, b in itertools.product(range(1, m + 4), repeat=2))
    return np.array(vals[:count])


def square_oracle(points_per_wavelength: float = 8.0, k_max: float = 25.0, count: int = 20) -> float:
    """Max relative error of the lowest ``count`` unit-square levels."""
    dom = Rectangle(1.0, 1.0)
    e_max = k_max**2
    grid = build_grid(dom, points_per_wavelength, e_max)
    basis = solve_eigen(dom, grid, e_max)
    exact = square_levels(count)
    return float(np.max(np.abs(basis.energies[:count] - exact) / exact))


def free_gaussian_oracle(
    tol: tuple[float, float] = (1e-12, 1e-11),
    method: str = "LSODA",
    spreading_times: float = 3.0,
    alpha: float = 30.68,
    momentum: tuple[float, float] = (96.0 / math.sqrt(5.0), -48.0 / math.sqrt(5.0)),
    samples: int = 200,
) -> float:
    """Worst relative deviation of integrated free-space trajectories from the scaling law.

    The error is measured against the trajectory's offset from the packet
    centre, which grows with the width ratio.
    """
    g = FreeGaussian(alpha, (0.0, 0.0), momentum)
    mesh = np.linspace(0.0, spreading_times * g.spreading_time, samples + 1)
    worst = 0.0
    for r, ang in ((0.01, 0.3), (0.05, 2.0), (0.1, 4.1)):
        p0 = (r * math.cos(ang), r * math.sin(ang))
        tr = integrate_trajectory(g, p0, mesh, tol, method)
        if tr.status != "ok" or len(tr.t) != len(mesh):
            return math.inf
        exact = g.exact(p0, mesh)
        centre = 2.0 * np.outer(mesh, momentum)
        rel = np.linalg.norm(tr.xy - exact, axis=1) / np.linalg.norm(exact - centre, axis=1)
        worst = max(worst, float(rel.max()))
    return worst


def _read_centroids(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return np.array([[float(v) for v in r] for r in rows[1:]])


def checklist(pipe, oracles: bool = True) -> list[Check]:
    """Evaluate every reproduction criterion from a finished pipeline."""
    cfg = pipe.cfg
    checks: list[Check] = []
    domain = domain_from_params(cfg["domain"])

    if oracles:
        err = square_oracle()
        checks.append(Check(1, "square-billiard eigenvalues within 0.5%", err <= 5e-3, f"max rel err {err:.2e}"))
    else:
        checks.append(Check(1, "square-billiard eigenvalues within 0.5%", None, "oracles not run"))

    basis = pipe.basis()
    count = int(np.sum(basis.energies <= 3456.0))
    weyl = weyl_count(domain, 3456.0)
    rel = abs(count - weyl) / weyl
    checks.append(Check(2, "Weyl count at E_max=3456 within 5%", rel <= 0.05, f"{count} modes vs {weyl:.1f} ({rel:.2%})"))

    info = json.loads((pipe.stage_dir("project") / "info.json").read_text())
    state = pipe.state()
    s0 = float(survival_exact(state, np.array([0.0]))[0])
    c = info["centroid"]
    px, py = cfg["packet"]["momentum"]
    p2 = px * px + py * py
    period = diagonal_po(domain).period(math.sqrt(p2) / MASS)
    ok3 = (
        info["norm_capture"] >= 0.999
        and abs(s0 - 1.0) <= 1e-9
        and abs(c[0] - 1.0) <= 1e-3
        and abs(c[1] - 0.5) <= 1e-3
        and abs(p2 - 2304.0) <= 1e-9 * 2304.0
        and abs(period - 0.0466) <= 5e-5
    )
    checks.append(Check(
        3, "packet projection", ok3,
        f"capture {info['norm_capture']:.6f}, S(0)={s0:.12f}, <x,y>=({c[0]:.5f}, {c[1]:.5f}), "
        f"|P0|^2={p2:.6f}, T={period:.5f}",
    ))

    summ = pipe.info("survival")
    ref = max((p[1] for p in summ["exact_peaks"]), default=0.0)
    main = [p for p in summ["exact_peaks"] if p[2] >= cfg["survival"]["main_fraction"] * ref]
    lab = {p[3]: p for p in summ["exact_peaks"] if p[3] in ("a", "c")}
    shoulders = [p for p in summ["exact_peaks"] if p[3] == "shoulder" and "c" in lab and p[0] < lab["c"][0]]
    ok4 = (
        len(main) == 2 and "a" in lab and "c" in lab
        and abs(lab["a"][0] - 0.047) <= 0.003 and abs(lab["c"][0] - 0.094) <= 0.004
        and lab["c"][1] < lab["a"][1] and len(shoulders) >= 1
    )
    detail = ", ".join(f"{k}: t={v[0]:.5f} S={v[1]:.4f}" for k, v in sorted(lab.items()))
    checks.append(Check(4, "exact recurrences at 0.047/0.094 with shoulder", ok4,
                        f"{len(main)} main peaks ({detail}); {len(shoulders)} leading-edge shoulder(s)"))

    pm = summ["peak_match"]
    ok5 = set(pm) == {"a", "c"} and all(v["diff"] < 0.005 for v in pm.values())
    checks.append(Check(5, "estimator peak times within 0.005", ok5,
                        ", ".join(f"{k}: {v['approx']:.5f} vs {v['exact']:.5f}" for k, v in sorted(pm.items()))))

    if oracles:
        err = free_gaussian_oracle()
        checks.append(Check(6, "free-Gaussian trajectories within 1e-6", err <= 1e-6, f"max rel err {err:.2e}"))
    else:
        checks.append(Check(6, "free-Gaussian trajectories within 1e-6", None, "oracles not run"))

    cen = _read_centroids(pipe.stage_dir("snapshots") / "centroids.csv")
    dev_density = float(np.max(np.hypot(cen[:, 1] - cen[:, 3], cen[:, 2] - cen[:, 4])))
    ens = pipe.ensemble()
    t_max = cfg["snapshots"]["centroid_t_max"]
    k = int(np.searchsorted(ens.mesh, t_max + 1e-12))
    ray = classical_ray(cfg, ens.mesh[k - 1]).position(ens.mesh[:k])
    mean = np.nanmean(ens.positions()[:, :k], axis=0)
    dev_ens = float(np.max(np.linalg.norm(mean - ray, axis=1)))
    checks.append(Check(7, f"centroids track the ray within 0.05 for t<={t_max}",
                        dev_density <= 0.05 and dev_ens <= 0.05,
                        f"density {dev_density:.4f}, ensemble {dev_ens:.4f}"))

    close = min_pair_distance(ens)
    n_left = sum(s == "left-domain" for s in ens.statuses())
    checks.append(Check(8, "single-valued flow, none left the domain", close >= 1e-6 and n_left == 0,
                        f"closest ok-pair {close:.3e}, left-domain {n_left}"))

    ch, ar = summ.get("chord_distance"), summ.get("arrival")
    if ch is None or ar is None:
        checks.append(Check(9, "contributor analysis", False, "peak (a) or (b) missing from the estimator"))
    else:
        ratio = ch["ensemble"] / ch["top"]
        checks.append(Check(9, "contributors: chord 3x closer at (a), later arrival at (b)",
                            ratio >= 3.0 and ar["delay"] > 0,
                            f"chord distance ratio {ratio:.2f}, arrival delay {ar['delay']:.4f}"))

    sc = pipe.info("scar")
    r = sc["tube_ratio"]
    checks.append(Check(10, "scar tube ratio > 3 and above packet baseline",
                        r["a"] > 3.0 and r["a"] > r["packet"],
                        f"scar {r['a']:.2f}, packet {r['packet']:.2f}, overlap(a,c) {sc['overlap_a_c']:.3f}"))

    checks.append(Check(11, "byte-identical reruns", None, "compare checksums.sha256 of two clean runs"))
    return checks


def min_pair_distance(ens) -> float:
    """Smallest distance between two ok-status trajectories at a common mesh time."""
    ok = [k for k, s in enumerate(ens.statuses()) if s == "ok"]
    if len(ok) < 2:
        return math.inf
    X = ens.positions()[ok]
    best = math.inf
    for k in range(X.shape[1]):
        P = X[:, k]
        d = np.hypot(P[:, None, 0] - P[None, :, 0], P[:, None, 1] - P[None, :, 1])
        d[np.diag_indices(len(ok))] = np.inf
        best = min(best, float(np.nanmin(d)))
    return best

"""Cached stage pipeline: eigensolve -> project -> {snapshots, trajectories -> survival, scar}.

Each stage writes into ``<cache>/<stage>/<key[:16]>/`` and finishes by writing
``provenance.json``.  The key hashes the stage's config sections, the keys of
its upstream stages and the tool version, so a config change re-runs exactly
the stages that read it and everything downstream.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import ncx2

from . import __version__
from .bohm import (
    EnsembleSpec,
    Trajectory,
    TrajectoryEnsemble,
    integrate_ensemble,
    output_mesh,
    sample_initial,
    segment_panels,
    write_ensemble_csv,
    write_panel_csv,
)
from .config import Config, digest
from .geometry import Ray, diagonal_po, domain_from_params, reflect_ray, write_polyline_csv
from .io import file_sha256, provenance_lines, write_grid
from .packet import (
    MASS,
    CoherentParams,
    ProjectionError,
    SpectralState,
    coherent_state,
    density_centroid,
    density_snapshot,
    evolve,
    node_epsilon,
    project,
)
from .scar import ScarSpec, build_scar, overlap, tube_localization
from .spectral import EigenBasis, build_grid, load_basis, save_basis, solve_eigen
from .survival import (
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

log = logging.getLogger(__name__)

MAX_RAISE_ATTEMPTS = 6
RAISE_FACTOR = 1.05


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    upstream: tuple[str, ...]
    sections: tuple[str, ...]


STAGES: dict[str, Stage] = {
    "eigensolve": Stage((), ("domain", "grid", "packet")),
    "project": Stage(("eigensolve",), ("grid", "packet")),
    "snapshots": Stage(("project",), ("snapshots", "integrator")),
    "trajectories": Stage(("project",), ("ensemble", "integrator")),
    "survival": Stage(("project", "trajectories"), ("survival",)),
    "scar": Stage(("project",), ("scar",)),
}


def packet_params(cfg: Config) -> CoherentParams:
    p = cfg["packet"]
    return CoherentParams(p["alpha"], tuple(p["center"]), tuple(p["momentum"]))


def estimate_e_max(params: CoherentParams, capture: float) -> float:
    """Energy below which the free packet keeps ``capture`` of its norm, with margin.

    For exp(-alpha r^2 + i P.r) the momentum density is Gaussian with variance
    alpha per component, so |p|^2 / alpha is noncentral chi-square with two
    degrees of freedom; with mass 1/2 the energy is |p|^2.  Half the allowed
    loss is reserved for boundary and discretisation effects.
    """
    nc = (params.momentum[0] ** 2 + params.momentum[1] ** 2) / params.alpha
    return float(ncx2.isf(0.5 * (1.0 - capture), 2, nc) * params.alpha)


class Pipeline:
    def __init__(
        self,
        config: Config,
        cache_dir: str | Path,
        auto_deps: bool = False,
        strict: bool = False,
        basis_path: str | Path | None = None,
        progress: Callable[[str], None] | None = None,
    ):
        self.cfg = config
        self.cache = Path(cache_dir)
        self.auto_deps = auto_deps
        self.strict = strict
        self.basis_path = Path(basis_path) if basis_path is not None else None
        self.progress = progress or (lambda msg: log.info(msg))
        self._keys: dict[str, str] = {}
        self._objs: dict[str, object] = {}

    # keys and cache layout -------------------------------------------------

    def key(self, stage: str) -> str:
        if stage not in self._keys:
            spec = STAGES[stage]
            if stage == "eigensolve" and self.basis_path is not None:
                payload = {"stage": stage, "basis_file": file_sha256(self.basis_path)}
            else:
                payload = {
                    "stage": stage,
                    "version": __version__,
                    "config": self.cfg.subset(spec.sections),
                    "upstream": {u: self.key(u) for u in spec.upstream},
                }
            self._keys[stage] = digest(payload)
        return self._keys[stage]

    def upstream_keys(self, stage: str) -> dict[str, str]:
        return {u: self.key(u) for u in STAGES[stage].upstream}

    def stage_dir(self, stage: str) -> Path:
        return self.cache / stage / self.key(stage)[:16]

    def header(self, stage: str) -> list[str]:
        return provenance_lines(stage, self.key(stage), self.upstream_keys(stage))

    def _external(self, stage: str) -> bool:
        return stage == "eigensolve" and self.basis_path is not None

    def is_cached(self, stage: str) -> bool:
        if self._external(stage):
            return True
        prov = self.stage_dir(stage) / "provenance.json"
        if not prov.exists():
            return False
        return json.loads(prov.read_text()).get("key") == self.key(stage)

    def plan(self, stages) -> list[tuple[str, str, bool]]:
        """(stage, key, cached) for ``stages`` and everything they need, in run order."""
        need: list[str] = []

        def visit(s):
            for u in STAGES[s].upstream:
                visit(u)
            if s not in need:
                need.append(s)

        for s in stages:
            visit(s)
        return [(s, self.key(s), self.is_cached(s)) for s in need]

    def _verify(self, stage: str) -> None:
        d = self.stage_dir(stage)
        prov = json.loads((d / "provenance.json").read_text())
        for name, h in prov["artifacts"].items():
            p = d / name
            if not p.exists() or file_sha256(p) != h:
                raise StageError(f"cached artifact {p} does not match its recorded hash; refusing to reuse it")

    # running ---------------------------------------------------------------

    def run(self, stage: str) -> Path | None:
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        if self._external(stage):
            return None
        if self.is_cached(stage):
            if self.strict:
                self._verify(stage)
            self.progress(f"{stage}: cache hit ({self.key(stage)[:12]})")
            return self.stage_dir(stage)
        for up in STAGES[stage].upstream:
            if not self.is_cached(up) and not self.auto_deps:
                raise StageError(f"stage {stage!r} needs {up!r}; run it first or pass --auto-deps")
            self.run(up)
        self.progress(f"{stage}: running ({self.key(stage)[:12]})")
        final = self.stage_dir(stage)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{stage}-", dir=final.parent))
        try:
            getattr(self, f"_run_{stage}")(tmp)
            artifacts = {p.name: file_sha256(p) for p in sorted(tmp.iterdir()) if p.is_file()}
            prov = {
                "stage": stage,
                "key": self.key(stage),
                "version": __version__,
                "config": self.cfg.subset(STAGES[stage].sections),
                "upstream": self.upstream_keys(stage),
                "artifacts": artifacts,
            }
            (tmp / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True) + "\n")
            if final.exists():
                shutil.rmtree(final)
            tmp.rename(final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return final

    def provenance(self, stage: str) -> dict:
        return json.loads((self.stage_dir(stage) / "provenance.json").read_text())

    def info(self, stage: str) -> dict:
        return json.loads((self.stage_dir(stage) / "info.json").read_text())

    # stage bodies ------------------------------------------------------------

    def _run_eigensolve(self, out: Path) -> None:
        cfg = self.cfg
        domain = domain_from_params(cfg["domain"])
        g = cfg["grid"]
        params = packet_params(cfg)
        e_max = g["e_max"]
        if g["auto_raise"]:
            e_max = max(e_max, estimate_e_max(params, g["capture_threshold"]))
        attempts = []
        for _ in range(MAX_RAISE_ATTEMPTS):
            grid = build_grid(domain, g["points_per_wavelength"], e_max)
            basis = solve_eigen(domain, grid, e_max, g["stencil"])
            try:
                state = project(coherent_state(params, grid), basis, g["capture_threshold"])
                attempts.append({"e_max": e_max, "count": len(basis), "capture": state.norm_capture})
                break
            except ProjectionError as exc:
                attempts.append({"e_max": e_max, "count": len(basis), "error": str(exc)})
                if not g["auto_raise"]:
                    raise StageError(str(exc)) from None
                self.progress(f"eigensolve: capture too low at E_max={e_max:.6g}; raising")
                e_max *= RAISE_FACTOR
        else:
            raise StageError(f"norm capture still below threshold after {MAX_RAISE_ATTEMPTS} attempts")
        save_basis(basis, out / "basis.bin")
        info = {"e_max": e_max, "count": len(basis), "nx": grid.nx, "ny": grid.ny, "h": grid.h, "attempts": attempts}
        (out / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
        self._objs["eigensolve"] = basis

    def _run_project(self, out: Path) -> None:
        basis = self.basis()
        params = packet_params(self.cfg)
        state = project(coherent_state(params, basis.grid), basis, self.cfg["grid"]["capture_threshold"])
        np.save(out / "coeffs.npy", state.coeffs)
        centroid = density_centroid(state, basis)
        info = {
            "norm_capture": state.norm_capture,
            "energy_expectation": state.energy_expectation(),
            "centroid": [float(v) for v in centroid],
            "node_epsilon": node_epsilon(state, basis),
            "n_modes": len(basis),
            "e_max": basis.e_max,
        }
        (out / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
        self._objs["project"] = state

    def _run_snapshots(self, out: Path) -> None:
        basis, state = self.basis(), self.state()
        g = basis.grid
        head = self.header("snapshots")
        for k, t in enumerate(self.cfg["snapshots"]["times"]):
            rho = density_snapshot(evolve(state, t), basis)
            write_grid(out / f"density_{k}.grid", rho, g.dx, g.dy, t, g.x0, g.y0, head)
        # density centroid against the classical ray over the early window
        params = packet_params(self.cfg)
        it = self.cfg["integrator"]
        t_max = self.cfg["snapshots"]["centroid_t_max"]
        mesh = output_mesh(it["t_end"], it["dt_out"])
        mesh = mesh[mesh <= t_max + 1e-12]
        ray = classical_ray(self.cfg, mesh[-1])
        rp = ray.position(mesh)
        with open(out / "centroids.csv", "w", newline="") as fh:
            for line in head:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "x_density", "y_density", "x_ray", "y_ray"])
            for t, r in zip(mesh, rp):
                c = density_centroid(evolve(state, float(t)), basis)
                w.writerow([repr(float(v)) for v in (t, c[0], c[1], r[0], r[1])])
        po = diagonal_po(basis.domain)
        write_polyline_csv(out / "diagonal_po.csv", [0.0, po.period(params.speed) / 2], po.points)
        full = classical_ray(self.cfg, it["t_end"])
        write_polyline_csv(out / "classical_ray.csv", full.times, full.points)

    def _run_trajectories(self, out: Path) -> None:
        basis, state = self.basis(), self.state()
        spec = ensemble_spec(self.cfg)
        it = self.cfg["integrator"]
        pts = sample_initial(spec, basis.domain)

        def report(k, tr):
            self.progress(f"trajectories: {k + 1}/{len(pts)} {tr.status}")

        ens = integrate_ensemble(
            pts, state, basis, it["t_end"], (it["atol"], it["rtol"]), it["dt_out"], it["method"], spec, report
        )
        head = self.header("trajectories")
        write_ensemble_csv(ens, out / "ensemble.csv", head)
        for k, panel in enumerate(segment_panels(ens, self.cfg["ensemble"]["panel_cuts"])):
            write_panel_csv(panel, out / f"panel_{k}.csv", head + [f"interval {panel.t_lo!r} {panel.t_hi!r}"])
        meta = [
            {"id": tr.id, "status": tr.status, "t_stop": tr.t_stop, "min_amplitude": tr.min_amplitude}
            for tr in ens.trajectories
        ]
        (out / "trajectories.json").write_text(json.dumps(meta, indent=1) + "\n")
        self._objs["trajectories"] = ens

    def _run_survival(self, out: Path) -> None:
        res = analyse_survival(self.cfg, self.state(), self.ensemble())
        head = self.header("survival")
        write_survival_csv(res.series, out / "survival.csv", head + [res.series.meta["normalization"]])
        write_peaks_csv({"exact": res.exact_peaks, "approx": res.approx_peaks}, out / "peaks.csv", head)
        (out / "peaks.txt").write_text(
            format_report("exact", res.exact_peaks) + "\n" + format_report("approx (rescaled)", res.approx_peaks) + "\n"
        )
        ens = self.ensemble()
        with open(out / "contributors.csv", "w", newline="") as fh:
            for line in head:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["label", "t", "rank", "id", "contribution"])
            for label, (t, ranked) in res.contributors.items():
                for r, c in enumerate(ranked):
                    w.writerow([label, repr(t), r, c.id, repr(c.contribution)])
        top_k = self.cfg["survival"]["top_k"]
        for label, (t, ranked) in res.contributors.items():
            with open(out / f"contributor_paths_{label}.csv", "w", newline="") as fh:
                for line in head:
                    fh.write(f"# {line}\n")
                w = csv.writer(fh)
                w.writerow(["rank", "id", "t", "x", "y"])
                for r, c in enumerate(ranked[:top_k]):
                    tr = ens.trajectories[c.id]
                    for tt, (x, y) in zip(tr.t, tr.xy):
                        w.writerow([r, c.id, repr(float(tt)), repr(float(x)), repr(float(y))])
        (out / "info.json").write_text(json.dumps(res.summary, indent=1, sort_keys=True) + "\n")

    def _run_scar(self, out: Path) -> None:
        basis, state = self.basis(), self.state()
        s = self.cfg["scar"]
        params = packet_params(self.cfg)
        po = diagonal_po(basis.domain)
        period = po.period(params.speed)
        spec_a = ScarSpec(s["center_energy"], s["width"], s["n_periods"], period)
        spec_c = ScarSpec(s["center_energy"], None, s["second_n_periods"], period)
        base = ScarSpec(s["center_energy"], math.inf, 1.0, period)
        scars = {name: build_scar(state, basis, sp) for name, sp in (("a", spec_a), ("c", spec_c), ("packet", base))}
        g = basis.grid
        head = self.header("scar")
        for name, sc in scars.items():
            write_grid(out / f"scar_{name}.grid", sc.intensity, g.dx, g.dy, 0.0, g.x0, g.y0,
                       head + [f"window center {sc.spec.center_energy!r} width {sc.spec.resolved_width!r}"])
        w = s["tube_width"]
        info = {
            "period": period,
            "tube_width": w,
            "width": {k: sc.spec.resolved_width for k, sc in scars.items()},
            "tube_ratio": {k: tube_localization(sc.intensity, g, po, w) for k, sc in scars.items()},
            "overlap_a_c": overlap(scars["a"], scars["c"]),
        }
        (out / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")

    # loaders -------------------------------------------------------------------

    def basis(self) -> EigenBasis:
        if "eigensolve" not in self._objs:
            path = self.basis_path if self._external("eigensolve") else self._need("eigensolve") / "basis.bin"
            self._objs["eigensolve"] = load_basis(path)
        return self._objs["eigensolve"]

    def state(self) -> SpectralState:
        if "project" not in self._objs:
            d = self._need("project")
            info = json.loads((d / "info.json").read_text())
            c = np.load(d / "coeffs.npy")
            self._objs["project"] = SpectralState(c, self.basis().energies, 0.0, info["norm_capture"])
        return self._objs["project"]

    def ensemble(self) -> TrajectoryEnsemble:
        if "trajectories" not in self._objs:
            d = self._need("trajectories")
            self._objs["trajectories"] = read_ensemble(d / "ensemble.csv", d / "trajectories.json", self.cfg)
        return self._objs["trajectories"]

    def _need(self, stage: str) -> Path:
        if not self.is_cached(stage):
            if not self.auto_deps:
                raise StageError(f"stage {stage!r} has not been run; run it first or pass --auto-deps")
            self.run(stage)
        return self.stage_dir(stage)


def ensemble_spec(cfg: Config) -> EnsembleSpec:
    e = cfg["ensemble"]
    return EnsembleSpec(e["n_traj"], tuple(e["rings"]), e["per_ring"], tuple(cfg["packet"]["center"]), e["seed"])


def classical_ray(cfg: Config, t_max: float):
    params = packet_params(cfg)
    domain = domain_from_params(cfg["domain"])
    return reflect_ray(domain, Ray(params.center, params.momentum, params.speed), t_max)


def read_ensemble(csv_path: Path, meta_path: Path, cfg: Config) -> TrajectoryEnsemble:
    meta = json.loads(meta_path.read_text())
    rows: dict[int, list] = {m["id"]: [] for m in meta}
    with open(csv_path, newline="") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        reader = csv.reader(lines)
        next(reader)
        for r in reader:
            rows[int(r[0])].append([float(v) for v in r[1:6]])
    it = cfg["integrator"]
    mesh = output_mesh(it["t_end"], it["dt_out"])
    trajs = []
    for m in meta:
        a = np.array(rows[m["id"]]).reshape(-1, 5)
        trajs.append(Trajectory(m["id"], a[:, 0], a[:, 1:3], a[:, 3:5] / MASS, m["status"], m["t_stop"], m["min_amplitude"]))
    return TrajectoryEnsemble(ensemble_spec(cfg), trajs, mesh, (it["atol"], it["rtol"]), it["method"])


# ---------------------------------------------------------------------------
# survival analysis shared by the stage and the checklist


@dataclass
class SurvivalAnalysis:
    series: SurvivalSeries
    exact_peaks: object
    approx_peaks: object
    contributions: np.ndarray
    contributors: dict[str, tuple[float, list]]
    summary: dict


def analyse_survival(cfg: Config, state: SpectralState, ens: TrajectoryEnsemble) -> SurvivalAnalysis:
    sv = cfg["survival"]
    mesh = ens.mesh
    series = survival_approx(ens, sv["sigma"])
    series.s_exact = survival_exact(state, mesh)
    exact = find_peaks(mesh, series.s_exact, sv["prominence"], sv["main_fraction"])
    t_a = exact.first("a").t if exact.first("a") else None
    approx = find_peaks(
        mesh, series.s_approx_rescaled, sv["prominence"], sv["main_fraction"],
        period=t_a, split_times=[t_a] if t_a is not None else None,
    )
    C = contributions(ens, sv["sigma"])

    # estimator main peaks per recurrence window of the exact series: maxima whose
    # prominence is at least match_fraction of the window's largest; the nearest
    # one is matched, the plain window maximum is reported alongside
    matches = {}
    if t_a is not None:
        for label in ("a", "c"):
            p = exact.first(label)
            if p is None:
                continue
            k = 1 if label == "a" else 2
            lo, hi = (k - 0.5) * t_a, min((k + 0.5) * t_a, mesh[-1])
            t_max, _ = window_peak(mesh, series.s_approx_rescaled, lo, hi)
            cand = [q for q in approx.peaks if lo <= q.t < hi and q.label != "shoulder"]
            if cand:
                top = max(q.prominence for q in cand)
                cand = [q for q in cand if q.prominence >= sv["match_fraction"] * top]
                ta = min(cand, key=lambda q: abs(q.t - p.t)).t
            else:
                ta = t_max
            matches[label] = {"exact": p.t, "approx": ta, "diff": abs(ta - p.t),
                              "window_max": t_max, "window_max_diff": abs(t_max - p.t)}

    contributors = {}
    for label in ("a", "b", "c"):
        p = approx.first(label)
        if p is not None:
            contributors[label] = top_contributors(ens, sv["sigma"], p.t, C=C)

    summary: dict = {
        "sigma": sv["sigma"],
        "n_traj": len(ens),
        "raw_at_t0": series.meta["raw_at_t0"],
        "affected_from_t": series.meta["affected_from_t"],
        "truncated": series.meta["truncated_trajectories"],
        "exact_peaks": [[p.t, p.height, p.prominence, p.label] for p in exact.peaks],
        "approx_peaks": [[p.t, p.height, p.prominence, p.label] for p in approx.peaks],
        "peak_match": matches,
    }
    top_k = sv["top_k"]
    if "a" in contributors:
        t_pa, ranked = contributors["a"]
        ids = [c.id for c in ranked[:top_k]]
        chord = diagonal_po(domain_from_params(cfg["domain"])).points
        dist = mean_path_distance(ens, chord, t_pa)
        summary["chord_distance"] = {
            "top": float(np.mean(dist[ids])),
            "ensemble": float(np.nanmean(dist)),
            "ids": ids,
            "t_hi": t_pa,
        }
    if "a" in contributors and "b" in contributors and t_a is not None:
        arr = arrival_times(C, mesh, 0.5 * t_a, 1.5 * t_a)
        ids_a = [c.id for c in contributors["a"][1][:top_k]]
        ids_b = [c.id for c in contributors["b"][1][:top_k]]
        summary["arrival"] = {
            "a": float(np.mean(arr[ids_a])),
            "b": float(np.mean(arr[ids_b])),
            "delay": float(np.mean(arr[ids_b]) - np.mean(arr[ids_a])),
            "ids_a": ids_a,
            "ids_b": ids_b,
        }
    return SurvivalAnalysis(series, exact, approx, C, contributors, summary)


# ---------------------------------------------------------------------------
# figure datasets

# (stage, cached file, exported name); "{k}" expands over numbered files
EXPORTS = (
    ("survival", "survival.csv", "fig1_survival.csv"),
    ("survival", "peaks.csv", "fig1_peaks.csv"),
    ("survival", "peaks.txt", "fig1_peaks.txt"),
    ("trajectories", "ensemble.csv", "fig2_ensemble.csv"),
    ("trajectories", "panel_{k}.csv", "fig2_panel_{k}.csv"),
    ("snapshots", "density_{k}.grid", "fig3_density_{k}.grid"),
    ("snapshots", "centroids.csv", "fig3_centroids.csv"),
    ("snapshots", "diagonal_po.csv", "overlay_diagonal_po.csv"),
    ("snapshots", "classical_ray.csv", "overlay_classical_ray.csv"),
    ("survival", "contributors.csv", "fig4_contributors.csv"),
    ("survival", "contributor_paths_{k}.csv", "fig4_paths_{k}.csv"),
    ("scar", "scar_{k}.grid", "fig4_scar_{k}.grid"),
)
FIGURE_STAGES = ("snapshots", "trajectories", "survival", "scar")


def export_figures(pipe: Pipeline, out: str | Path) -> list[Path]:
    """Copy every figure dataset from the cache into ``out``; returns the written files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stage, src, dst in EXPORTS:
        d = pipe.stage_dir(stage)
        if "{k}" in src:
            head, tail = src.split("{k}")
            for p in sorted(d.glob(src.replace("{k}", "*"))):
                k = p.name[len(head) : len(p.name) - len(tail)]
                target = out / dst.replace("{k}", k)
                shutil.copyfile(p, target)
                written.append(target)
        else:
            shutil.copyfile(d / src, out / dst)
            written.append(out / dst)
    pipe.cfg.write(out / "config.ini")
    written.append(out / "config.ini")
    lines = [f"{file_sha256(p)}  {p.name}" for p in sorted(written, key=lambda p: p.name)]
    (out / "checksums.sha256").write_text("\n".join(lines) + "\n")
    return written

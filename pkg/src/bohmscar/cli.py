"""Command-line driver: ``bohmscar <stage> [options]``.

Exit codes: 0 success, 1 stage or input error, 2 failed checks
(``reproduce-paper --check`` and ``validate``).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import Config, ConfigError
from .pipeline import FIGURE_STAGES, STAGES, Pipeline, StageError, export_figures

log = logging.getLogger("bohmscar")

EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run control")
    g.add_argument("--config", type=Path, help="INI configuration file")
    g.add_argument("--cache-dir", type=Path, default=Path(".bohmscar-cache"))
    g.add_argument("--out", type=Path, help="directory for exported datasets")
    g.add_argument("--basis", type=Path, help="use this eigenbasis file instead of running eigensolve")
    g.add_argument("--auto-deps", action="store_true", help="run missing upstream stages")
    g.add_argument("--strict", action="store_true", help="verify cached artifact hashes before reuse")
    g.add_argument("--dry-run", action="store_true", help="print the stage plan and exit")
    g.add_argument("--write-config", type=Path, help="write the resolved configuration here")
    g.add_argument("-v", "--verbose", action="store_true")
    o = p.add_argument_group("parameter overrides")
    o.add_argument("--e-max", type=float)
    o.add_argument("--ppw", type=float, help="grid points per wavelength")
    o.add_argument("--n-traj", type=int)
    o.add_argument("--rings", type=_floats, help="ring radii, comma separated")
    o.add_argument("--seed", type=int)
    o.add_argument("--tol", type=_floats, help="atol[,rtol]")
    o.add_argument("--t-end", type=float)
    o.add_argument("--dt-out", type=float)
    o.add_argument("--sigma", type=float)
    o.add_argument("--prominence", type=float)
    o.add_argument("--scar-ec", type=float)
    o.add_argument("--scar-de", type=float)
    o.add_argument("--tube-width", type=float)
    o.add_argument("--snapshot-times", type=_floats)
    return p


OVERRIDES = {
    "e_max": ("grid", "e_max"),
    "ppw": ("grid", "points_per_wavelength"),
    "n_traj": ("ensemble", "n_traj"),
    "rings": ("ensemble", "rings"),
    "seed": ("ensemble", "seed"),
    "t_end": ("integrator", "t_end"),
    "dt_out": ("integrator", "dt_out"),
    "sigma": ("survival", "sigma"),
    "prominence": ("survival", "prominence"),
    "scar_ec": ("scar", "center_energy"),
    "scar_de": ("scar", "width"),
    "tube_width": ("scar", "tube_width"),
    "snapshot_times": ("snapshots", "times"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bohmscar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    rp = sub.add_parser("reproduce-paper", parents=[common], help="run everything and export figure datasets")
    rp.add_argument("--check", action="store_true", help="exit 2 if any checklist item fails")
    rp.add_argument("--skip-oracles", action="store_true", help="do not run the square and free-Gaussian oracles")
    sub.add_parser("validate", parents=[common], help="run the oracle suites")
    return parser


def resolve_config(args) -> Config:
    cfg = Config.read(args.config) if args.config else Config()
    for attr, (section, key) in OVERRIDES.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(section, key, val)
    if getattr(args, "n_traj", None) is not None and args.rings is None:
        # keep ring sizes consistent with the new count
        cfg.set("ensemble", "per_ring", None)
    if args.tol is not None:
        if len(args.tol) not in (1, 2):
            raise ConfigError("--tol takes atol or atol,rtol")
        cfg.set("integrator", "atol", args.tol[0])
        cfg.set("integrator", "rtol", args.tol[-1])
    return cfg


def _validate(args, cfg: Config) -> int:
    from .checks import free_gaussian_oracle, square_oracle
    from .geometry import domain_from_params
    from .spectral import build_grid, inertia_count, laplacian, weyl_count

    failed = False
    err = square_oracle()
    ok = err <= 5e-3
    failed |= not ok
    print(f"[{'PASS' if ok else 'FAIL'}] square billiard, 20 lowest levels: max rel err {err:.2e}")
    domain = domain_from_params(cfg["domain"])
    e = 3456.0
    grid = build_grid(domain, cfg["grid"]["points_per_wavelength"], e)
    n = inertia_count(laplacian(grid, cfg["grid"]["stencil"]), e)
    w = weyl_count(domain, e)
    ok = abs(n - w) <= 0.05 * w
    failed |= not ok
    print(f"[{'PASS' if ok else 'FAIL'}] Weyl count at E={e:g}: {n} levels vs {w:.1f}")
    err = free_gaussian_oracle(method=cfg["integrator"]["method"])
    ok = err <= 1e-6
    failed |= not ok
    print(f"[{'PASS' if ok else 'FAIL'}] free Gaussian trajectories: max rel err {err:.2e}")
    return EXIT_CHECK if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve_config(args)
        if args.write_config:
            cfg.write(args.write_config)
        if args.command == "validate":
            return _validate(args, cfg)
        auto = args.auto_deps or args.command == "reproduce-paper"
        pipe = Pipeline(cfg, args.cache_dir, auto, args.strict, args.basis, progress=lambda m: print(m, file=sys.stderr))
        targets = FIGURE_STAGES if args.command == "reproduce-paper" else (args.command,)
        if args.dry_run:
            for stage, key, cached in pipe.plan(targets):
                print(f"{stage:13s} {key[:12]}  {'cached' if cached else 'to run'}")
            return EXIT_OK
        for stage in targets:
            path = pipe.run(stage)
            if args.command != "reproduce-paper":
                print(path if path is not None else args.basis)
                if args.out and path is not None:
                    args.out.mkdir(parents=True, exist_ok=True)
                    for f in sorted(path.iterdir()):
                        shutil.copyfile(f, args.out / f.name)
        if args.command != "reproduce-paper":
            return EXIT_OK
        from .checks import checklist, format_checklist

        out = args.out or Path(cfg["output"]["directory"])
        export_figures(pipe, out)
        checks = checklist(pipe, oracles=not args.skip_oracles)
        text = format_checklist(checks)
        (out / "checklist.txt").write_text(text + "\n")
        print(text)
        if args.check and any(c.passed is False for c in checks):
            return EXIT_CHECK
        return EXIT_OK
    except (StageError, ConfigError, ValueError, OSError, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

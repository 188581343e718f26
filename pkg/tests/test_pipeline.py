import json
import math

import numpy as np
import pytest

from bohmscar.cli import main
from bohmscar.config import Config
from bohmscar.io import read_grid, write_grid
from bohmscar.packet import CoherentParams
from bohmscar.pipeline import Pipeline, StageError, estimate_e_max

TINY = """
[grid]
e_max = 300
[packet]
momentum = 5.0, -2.5
[ensemble]
n_traj = 4
rings = 0.05, 0.1
panel_cuts = 0.001
[integrator]
t_end = 0.002
dt_out = 0.0005
[snapshots]
times = 0.0005, 0.001
centroid_t_max = 0.001
[scar]
center_energy = 31.25
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return Config.from_text(TINY)


@pytest.fixture(scope="module")
def tiny_cache(tmp_path_factory, tiny_cfg):
    cache = tmp_path_factory.mktemp("cache")
    pipe = Pipeline(tiny_cfg, cache, auto_deps=True)
    for s in ("snapshots", "survival", "scar"):
        pipe.run(s)
    return cache


def test_estimate_e_max_default_packet():
    e = estimate_e_max(CoherentParams(), 0.999)
    assert 4000 < e < 5000


def test_cache_hit(tiny_cfg, tiny_cache):
    msgs = []
    pipe = Pipeline(tiny_cfg, tiny_cache, progress=msgs.append)
    before = (pipe.stage_dir("eigensolve") / "provenance.json").read_text()
    pipe.run("eigensolve")
    assert msgs == [f"eigensolve: cache hit ({pipe.key('eigensolve')[:12]})"]
    assert (pipe.stage_dir("eigensolve") / "provenance.json").read_text() == before


def test_changing_sigma_reruns_only_survival(tiny_cfg, tiny_cache):
    cfg = tiny_cfg.copy()
    cfg.set("survival", "sigma", 100.0)
    pipe = Pipeline(cfg, tiny_cache)
    plan = {s: cached for s, _, cached in pipe.plan(["snapshots", "survival", "scar"])}
    assert plan == {"eigensolve": True, "project": True, "snapshots": True,
                    "trajectories": True, "survival": False, "scar": True}
    msgs = []
    pipe.progress = msgs.append
    pipe.run("survival")
    assert [m.split(":")[0] for m in msgs if "running" in m] == ["survival"]


def test_missing_upstream_names_stage(tmp_path, tiny_cfg):
    pipe = Pipeline(tiny_cfg, tmp_path)
    with pytest.raises(StageError, match="'eigensolve'"):
        pipe.run("project")


def test_strict_refuses_tampered_cache(tmp_path, tiny_cfg, tiny_cache):
    import shutil

    cache = tmp_path / "c"
    shutil.copytree(tiny_cache, cache)
    pipe = Pipeline(tiny_cfg, cache)
    info = pipe.stage_dir("scar") / "info.json"
    info.write_text(info.read_text().replace("tube_ratio", "tube_ratio "))
    Pipeline(tiny_cfg, cache).run("scar")  # lenient mode reuses
    with pytest.raises(StageError, match="hash"):
        Pipeline(tiny_cfg, cache, strict=True).run("scar")


def test_provenance_closure(tiny_cfg, tiny_cache):
    pipe = Pipeline(tiny_cfg, tiny_cache)
    prov = pipe.provenance("survival")
    assert prov["upstream"] == {"project": pipe.key("project"), "trajectories": pipe.key("trajectories")}
    assert prov["config"] == tiny_cfg.subset(("survival",))
    head = (pipe.stage_dir("survival") / "survival.csv").read_text().splitlines()[:4]
    assert head[1] == f"# stage survival key {pipe.key('survival')}"
    assert f"# upstream trajectories {pipe.key('trajectories')}" in head


def test_capture_auto_raise(tiny_cfg, tiny_cache):
    info = Pipeline(tiny_cfg, tiny_cache).info("eigensolve")
    assert info["attempts"][-1]["capture"] >= 0.999
    assert info["e_max"] >= estimate_e_max(CoherentParams(momentum=(5.0, -2.5)), 0.999)


def test_low_cutoff_without_raise(tmp_path, tiny_cfg):
    cfg = tiny_cfg.copy()
    cfg.set("grid", "auto_raise", False)
    cfg.set("grid", "e_max", 100.0)
    with pytest.raises(StageError, match="capture"):
        Pipeline(cfg, tmp_path).run("eigensolve")


def test_external_basis(tmp_path, tiny_cfg, tiny_cache):
    src = Pipeline(tiny_cfg, tiny_cache)
    basis = src.stage_dir("eigensolve") / "basis.bin"
    pipe = Pipeline(tiny_cfg, tmp_path, basis_path=basis)
    assert pipe.run("eigensolve") is None
    pipe.run("project")
    np.testing.assert_array_equal(pipe.state().coeffs, src.state().coeffs)


def test_cli_dry_run_writes_nothing(tmp_path, capsys):
    cache = tmp_path / "cache"
    assert main(["reproduce-paper", "--dry-run", "--cache-dir", str(cache), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "eigensolve" in out and "to run" in out
    assert not cache.exists() and not (tmp_path / "o").exists()


def test_cli_stage_errors(tmp_path, capsys):
    assert main(["project", "--cache-dir", str(tmp_path)]) == 1
    assert "--auto-deps" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[packet]\nbeta = 1\n")
    assert main(["eigensolve", "--config", str(bad)]) == 1


def test_cli_overrides(tmp_path):
    from bohmscar.cli import build_parser, resolve_config

    args = build_parser().parse_args(
        ["survival", "--sigma", "100", "--tol", "1e-9,1e-7", "--rings", "0.01,0.02",
         "--n-traj", "6", "--snapshot-times", "0.01,0.02", "--scar-de", "50"]
    )
    cfg = resolve_config(args)
    assert cfg["survival"]["sigma"] == 100.0
    assert (cfg["integrator"]["atol"], cfg["integrator"]["rtol"]) == (1e-9, 1e-7)
    assert cfg["ensemble"]["rings"] == (0.01, 0.02)
    assert cfg["snapshots"]["times"] == (0.01, 0.02)
    assert cfg["scar"]["width"] == 50.0


def test_cli_reproduce_tiny(tmp_path, tiny_cache, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    out = tmp_path / "out"
    code = main(["reproduce-paper", "--config", str(cfg), "--cache-dir", str(tiny_cache),
                 "--out", str(out), "--skip-oracles", "--check"])
    text = capsys.readouterr().out
    # the tiny run cannot reproduce the recurrences
    assert code == 2
    assert "[FAIL]  4." in text and "[SKIP]  1." in text
    for name in ("fig1_survival.csv", "fig2_panel_0.csv", "fig2_panel_1.csv", "fig3_density_0.grid",
                 "fig4_scar_a.grid", "fig4_scar_c.grid", "checksums.sha256", "checklist.txt", "config.ini"):
        assert (out / name).exists(), name
    assert Config.read(out / "config.ini") == Config.from_text(TINY)
    g = read_grid(out / "fig3_density_1.grid")
    assert g.t == 0.001
    assert g.values.sum() * g.dx * g.dy == pytest.approx(1.0, abs=2e-3)


def test_cli_stage_out_copy(tmp_path, tiny_cache):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["scar", "--config", str(cfg), "--cache-dir", str(tiny_cache), "--out", str(tmp_path / "s")]) == 0
    info = json.loads((tmp_path / "s" / "info.json").read_text())
    assert info["tube_ratio"]["a"] > 0


def test_grid_file_round_trip(tmp_path):
    v = np.random.default_rng(0).random((5, 3)) / 3
    write_grid(tmp_path / "g.grid", v, 0.1, 0.1, 1 / 3, 0.0, 0.0, ["note"])
    g = read_grid(tmp_path / "g.grid")
    assert np.array_equal(g.values, v)
    assert g.t == 1 / 3 and g.comments == ("note",)
    lines = (tmp_path / "g.grid").read_text().splitlines()
    assert lines[1:4] == ["nx 5", "ny 3", "dx 0.1"]
    (tmp_path / "bad.grid").write_text("nx 2\nny 2\ndx 1.0\ndy 1.0\nt 0.0\nx0 0.0\ny0 0.0\n1.0\n")
    with pytest.raises(ValueError):
        read_grid(tmp_path / "bad.grid")

import json

import pytest
from click.testing import CliRunner

from mfcontrol.cli import main


def invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


def test_solve_writes_outputs(tmp_path):
    r = invoke("solve", "--config", "lq.yaml", "--particles", "64", "--steps", "8", "--out", str(tmp_path),
               "--flow", "gateaux")
    assert r.exit_code == 0, r.output
    for name in ("solution.csv", "flows.csv", "report.json", "paths.png"):
        assert (tmp_path / name).exists()
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["provenance"]["particles"] == 64
    assert len(rep["provenance"]["config_sha256"]) == 64
    lines = (tmp_path / "solution.csv").read_text().splitlines()
    assert lines[0].startswith("particle,knot,t,weight,y0,p0,v0")
    assert len(lines) == 1 + 64 * 9


def test_solution_csv_identical_across_jobs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, jobs in ((a, "1"), (b, "3")):
        r = invoke("solve", "--config", "quartic.yaml", "--particles", "96", "--steps", "6", "--jobs", jobs,
                   "--out", str(out), "--no-plot")
        assert r.exit_code == 0, r.output
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()


def test_missing_config_prints_error_json(tmp_path):
    r = invoke("solve", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path))
    assert r.exit_code == 2
    err = json.loads(r.output.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"


def test_verify_deterministic(tmp_path):
    r = invoke("verify", "--config", "deterministic.yaml", "--particles", "8", "--steps", "40",
               "--out", str(tmp_path), "--no-plot")
    assert r.exit_code == 0, r.output
    checks = json.loads((tmp_path / "report.json").read_text())["checks"]
    assert checks["gradient_identity"]["direction"] == "random"
    assert all(c["passed"] for c in checks.values())


def test_bellman_command(tmp_path):
    r = invoke("bellman", "--config", "lq.yaml", "--particles", "512", "--steps", "20", "--out", str(tmp_path),
               "--no-plot")
    assert r.exit_code == 0, r.output
    rows = (tmp_path / "bellman.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in rows[1:]] == ["clean", "fault"]


def test_master_command(tmp_path):
    r = invoke("master", "--config", "lq.yaml", "--particles", "256", "--steps", "10", "--x", "1.2",
               "--out", str(tmp_path), "--no-plot")
    assert r.exit_code == 0, r.output
    assert (tmp_path / "master.csv").exists()


def test_bench_deterministic(tmp_path):
    r = invoke("bench", "--suite", "deterministic", "--particles", "4", "--steps", "60", "--out", str(tmp_path),
               "--no-plot")
    rep = json.loads((tmp_path / "report.json").read_text())
    checks = rep["suites"]["deterministic"]["checks"]
    assert r.exit_code == (0 if all(checks.values()) else 1)
    assert checks["shooting_residual"]


def test_converge_command(tmp_path):
    r = invoke("converge", "--config", "lq.yaml", "--particles-list", "64,128", "--steps-list", "4,8",
               "--seeds", "0", "--out", str(tmp_path))
    assert r.exit_code == 0, r.output
    assert (tmp_path / "bench.csv").exists()
    assert (tmp_path / "convergence.png").exists()


def test_version():
    r = invoke("--version")
    assert "0.1.0" in r.output

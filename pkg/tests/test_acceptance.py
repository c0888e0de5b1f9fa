"""The thirteen acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line, printed together at the end of the
session; slow (a few minutes in total on one core).
"""

import time

import numpy as np
import pytest
from click.testing import CliRunner

from mfcontrol import SolveContext, gradient_identity, monotonicity_certificate, residuals, restart_check
from mfcontrol import sensitivity_check
from mfcontrol.analysis import bellman_residual, evaluate_master, terminal_gap
from mfcontrol.bench import LqParams, deterministic_benchmark, run_lq_benchmark
from mfcontrol.cli import main
from mfcontrol.flows import fd_convergence_check
from mfcontrol.measure import metric_property_check

from conftest import run

N, K = 4096, 50


def record(log, number, name, passed, detail):
    log.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return passed


@pytest.fixture(scope="module")
def lq_base(lq_cfg):
    return run(lq_cfg.spec, lq_cfg.initial_ensemble(N, 0), K)


@pytest.fixture(scope="module")
def lq_bench(lq_cfg):
    return run_lq_benchmark(LqParams.from_spec(lq_cfg.spec), N, K, seeds=(0, 1, 2, 3, 4), mean0=(1.0,), std0=(0.5,))


def test_01_lq_value(lq_bench, acceptance_log):
    s = lq_bench.summary
    ok = s["value_error"]["mean"] <= 0.03 and s["runtime"]["max"] <= 60.0
    assert record(acceptance_log, 1, "LQ value", ok,
                  f"mean rel error {s['value_error']['mean']:.4f} <= 0.03, max runtime {s['runtime']['max']:.1f}s <= 60s")


def test_02_lq_feedback(lq_bench, acceptance_log):
    e = lq_bench.summary["feedback_error"]["mean"]
    assert record(acceptance_log, 2, "LQ feedback", e <= 0.05, f"RMS rel error {e:.4f} <= 0.05")


def test_03_gradient_identity(det_cfg, lq_cfg, lq_base, acceptance_log):
    # exact discrete adjoint without noise: any direction
    ens = det_cfg.initial_ensemble(det_cfg.solver["particles"], 0)
    Kd = det_cfg.solver["steps"]
    det = run(det_cfg.spec, ens, Kd)
    X = np.random.default_rng(0).standard_normal(ens.states.shape)
    g_det = gradient_identity(det_cfg.spec, ens, X, ctx=SolveContext(K=Kd), base=det)
    # regression costate under noise: translation direction
    ctx = SolveContext(K=K)
    g_lq = gradient_identity(lq_cfg.spec, lq_base.ensemble, np.ones((N, 1)), ctx=ctx, base=lq_base)
    # informational only: the regression projection bias of a rough direction
    Xr = np.random.default_rng(0).standard_normal((N, 1))
    g_rough = gradient_identity(lq_cfg.spec, lq_base.ensemble, Xr, ctx=ctx, base=lq_base)
    ok = g_det["slope"] >= 0.8 and g_lq["slope"] >= 0.8
    assert record(acceptance_log, 3, "gradient identity", ok,
                  f"slope deterministic/random {g_det['slope']:.3f}, LQ/translation {g_lq['slope']:.3f} (>= 0.8); "
                  f"LQ/random {g_rough['slope']:.3f} informational")


def test_04_gateaux_flow(lq_base, acceptance_log):
    X = np.random.default_rng(1).standard_normal((N, 1))
    out = fd_convergence_check(lq_base, (1e-1, 1e-2, 1e-3), direction=X)
    e = out["rows"][-1]["relative_error"]
    assert record(acceptance_log, 4, "Gateaux flow", e <= 1e-2, f"rel sup-knot error at eps=1e-3 {e:.2e} <= 1e-2")


def test_05_sensitivity(lq_cfg, lq_base, acceptance_log):
    knots = np.linspace(0, K, 7).astype(int)[1:-1]
    rows = sensitivity_check(lq_cfg.spec, lq_base.ensemble, 0.0, lq_base, knots, SolveContext(K=K))
    worst = max(r["p_error"] for r in rows)
    assert record(acceptance_log, 5, "sensitivity", worst <= 0.05,
                  f"worst per-knot rel error {worst:.4f} <= 0.05 at knots {list(map(int, knots))}")


def test_06_restart(lq_base, acceptance_log):
    out = restart_check(lq_base, K // 2, SolveContext(K=K))
    assert record(acceptance_log, 6, "restart", out["passed"],
                  f"y {out['y_error']:.2e} <= {out['y_bound']:.2e}, p {out['p_error']:.2e} <= {out['p_bound']:.2e}")


def test_07_bellman(lq_cfg, acceptance_log):
    rel, factors = [], []
    for Kl, Nl in lq_cfg.raw["bench"]["bellman_levels"]:
        ens = lq_cfg.initial_ensemble(Nl, 0)
        ctx = SolveContext(K=Kl)
        sol = ctx.solve(lq_cfg.spec, ens, 0.0)
        clean = bellman_residual(lq_cfg.spec, ens, 0.0, ctx, sol)
        fault = bellman_residual(lq_cfg.spec, ens, 0.0, ctx, sol, grad_scale=1.1)
        rel.append(clean["relative"])
        factors.append(fault["relative"] / clean["relative"])
    ratios = [rel[i] / rel[i + 1] for i in range(len(rel) - 1)]
    ok = all(r >= 1.3 for r in ratios) and min(factors) >= 5.0
    assert record(acceptance_log, 7, "Bellman", ok,
                  f"residuals {', '.join(f'{r:.2e}' for r in rel)}; refinement factors "
                  f"{', '.join(f'{r:.2f}' for r in ratios)} >= 1.3; fault factor min {min(factors):.1f} >= 5")


def test_08_master(lq_cfg, acceptance_log):
    ens = lq_cfg.initial_ensemble(N, 0)
    ctx = SolveContext(K=K)
    x = lq_cfg.raw["bench"]["master_point"]
    rep = evaluate_master(lq_cfg.spec, x, ens, 0.0, ctx, cross_check=True)
    gap = terminal_gap(lq_cfg.spec, x, ens, ctx)
    cc = rep.cross_checks
    slopes = [cc["Dxi_dU_dnu"]["slope"], cc["Dxi2_dU_dnu"]["slope"]]
    ok = rep.master_residual_rel <= 0.05 and gap <= 1e-10 and all(0.8 <= s <= 1.2 for s in slopes)
    assert record(acceptance_log, 8, "master equation", ok,
                  f"interior rel residual {rep.master_residual_rel:.4f} <= 0.05, terminal gap {gap:.1e} <= 1e-10, "
                  f"Dirac FD slopes {slopes[0]:.3f}, {slopes[1]:.3f} (O(eps)); D_xU rel {cc['D_xU']['relative_error']:.3f}")


def test_09_wasserstein(acceptance_log):
    out = metric_property_check(samples=1000, seed=0)
    assert record(acceptance_log, 9, "Wasserstein/lifting", out["passed"],
                  f"{out['samples']} ensembles, failures {out['failures']}")


@pytest.fixture(scope="module")
def shipped(lq_cfg, quartic_cfg, det_cfg):
    return {"lq": lq_cfg, "quartic": quartic_cfg, "deterministic": det_cfg}


def test_10_first_order_condition(shipped, lq_base, acceptance_log):
    worst = {"lq": residuals(lq_base.spec, lq_base)["foc_max"]}
    for name in ("quartic", "deterministic"):
        cfg = shipped[name]
        sol = run(cfg.spec, cfg.initial_ensemble(cfg.solver["particles"], 0), cfg.solver["steps"],
                  basis=cfg.solver.get("basis", "affine"))
        worst[name] = residuals(sol.spec, sol)["foc_max"]
    ok = max(worst.values()) <= 1e-8
    assert record(acceptance_log, 10, "first-order condition", ok,
                  ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " <= 1e-8")


def test_11_monotonicity(shipped, acceptance_log):
    out = {k: monotonicity_certificate(c.spec, tuples=10_000) for k, c in shipped.items()}
    ok = all(o["passed"] for o in out.values())
    assert record(acceptance_log, 11, "monotonicity", ok,
                  ", ".join(f"{k} max gap {o['max_violation']:.2e}" for k, o in out.items()) + " <= 0")


def test_12_deterministic_benchmark(det_cfg, acceptance_log):
    ens = det_cfg.initial_ensemble(det_cfg.solver["particles"], 0)
    rep = deterministic_benchmark(det_cfg.spec, ens, K=det_cfg.solver["steps"])
    ok = rep.control_rms <= 1e-3 and rep.shooting_residual <= 1e-10
    assert record(acceptance_log, 12, "degenerate diffusion", ok,
                  f"RMS control error {rep.control_rms:.2e} <= 1e-3 (shooting residual {rep.shooting_residual:.1e})")


def test_13_determinism(tmp_path, acceptance_log):
    outs = []
    for jobs in ("1", "4", "1"):
        out = tmp_path / f"j{jobs}_{len(outs)}"
        r = CliRunner().invoke(main, ["solve", "--config", "lq.yaml", "--jobs", jobs, "--out", str(out),
                                      "--no-plot"], catch_exceptions=False)
        assert r.exit_code == 0, r.output
        outs.append((out / "solution.csv").read_bytes())
    ok = outs[0] == outs[1] == outs[2]
    assert record(acceptance_log, 13, "determinism", ok, f"solution.csv identical over jobs 1/4/1 ({len(outs[0])} bytes)")

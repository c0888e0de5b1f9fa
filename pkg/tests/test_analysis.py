import numpy as np
import pytest

from mfcontrol import SolveContext, SpecificationError, bellman_residual, gradient_identity, restart_check
from mfcontrol import evaluate_master, riccati_oracle, terminal_gap
from mfcontrol.analysis import master_value, solution_value, value_report
from mfcontrol.bench import LqParams
from mfcontrol.model import LinearDynamics, ProblemSpec, lq_meanfield


def test_gradient_identity_deterministic_random_direction(det_cfg, det_small):
    X = np.random.default_rng(0).standard_normal(det_small.ensemble.states.shape)
    ctx = SolveContext(K=det_small.K)
    out = gradient_identity(det_cfg.spec, det_small.ensemble, X, ctx=ctx, base=det_small)
    assert out["slope"] >= 0.8
    assert out["rows"][-1]["error"] <= 1e-2 * abs(out["predicted"])


def test_gradient_identity_lq_translation(lq_cfg, lq_small):
    ctx = SolveContext(K=lq_small.K)
    out = gradient_identity(lq_cfg.spec, lq_small.ensemble, np.ones((lq_small.N, 1)), ctx=ctx, base=lq_small)
    assert out["slope"] >= 0.8


def test_value_close_to_riccati(lq_cfg, lq_small):
    o = riccati_oracle(LqParams.from_spec(lq_cfg.spec))
    assert solution_value(lq_small) == pytest.approx(o.value(lq_small.ensemble), rel=0.05)


def test_restart_consistency(lq_small):
    out = restart_check(lq_small, lq_small.K // 2, SolveContext(K=lq_small.K))
    assert out["passed"], out


def test_bellman_fault_is_visible(lq_cfg):
    ens = lq_cfg.initial_ensemble(1024, 0)
    ctx = SolveContext(K=25)
    sol = ctx.solve(lq_cfg.spec, ens, 0.0)
    clean = bellman_residual(lq_cfg.spec, ens, 0.0, ctx, sol)
    fault = bellman_residual(lq_cfg.spec, ens, 0.0, ctx, sol, grad_scale=1.1)
    assert fault["relative"] >= 5 * clean["relative"]


def test_bellman_needs_control_free_noise():
    dyn = LinearDynamics.build(1, 1, f3=[[1.0]], sigma0=[[0.3]], sigma3=[[[0.2]]])
    spec = ProblemSpec(dyn, lq_meanfield(1, 1, 1.0, 0.0, 1.0, 1.0, 0.0), 1.0, 1, 1)
    from mfcontrol.measure import ParticleEnsemble

    with pytest.raises(SpecificationError):
        bellman_residual(spec, ParticleEnsemble.gaussian(16, [0.0], [1.0]), 0.0, SolveContext(K=5))


def test_terminal_gap_exact(lq_cfg):
    ens = lq_cfg.initial_ensemble(256, 0)
    assert terminal_gap(lq_cfg.spec, [1.2], ens, SolveContext(K=10)) <= 1e-10


def test_master_field_matches_lq_closed_form(lq_cfg):
    # U_bar = Pi ((x - m)^2 - Var) / 2 + Gamma m (x - m) for the LQ instance
    ens = lq_cfg.initial_ensemble(2048, 0)
    ctx = SolveContext(K=25, master_copies=256)
    o = riccati_oracle(LqParams.from_spec(lq_cfg.spec))
    m, var = ens.mean()[0], ens.covariance()[0, 0]
    x = 1.6
    exact = 0.5 * o.Pi[0, 0, 0] * ((x - m) ** 2 - var) + o.Gamma[0, 0, 0] * m * (x - m)
    got = master_value(lq_cfg.spec, [x], ens, 0.0, ctx)
    assert got["U_bar"] == pytest.approx(exact, abs=0.05 * (1 + abs(exact)))


def test_value_report_fields(lq_small):
    # same grid, seed and options as the fixture, so the same particle solution
    rep = value_report(lq_small.spec, lq_small.ensemble, 0.0, SolveContext(K=lq_small.K))
    assert rep.V == solution_value(lq_small)
    assert np.array_equal(rep.grad_X, lq_small.P[:, 0])
    assert rep.to_dict()["value"] == rep.V

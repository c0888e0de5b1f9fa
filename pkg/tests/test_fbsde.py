import numpy as np
import pytest

from mfcontrol import SolverError, SolverOptions, monotonicity_certificate, residuals
from mfcontrol.fbsde import features, feature_jacobian

from conftest import run


def test_lq_solution_residuals(lq_small):
    res = residuals(lq_small.spec, lq_small)
    assert lq_small.converged
    assert res["foc_max"] <= 1e-8
    assert res["forward_reconstruction"] <= 1e-10
    assert res["backward_max"] <= 1e-8


def test_deterministic_solve_is_pathwise(det_small):
    assert det_small.pathwise
    res = residuals(det_small.spec, det_small)
    assert res["foc_max"] <= 1e-8
    assert res["backward_max"] <= 1e-9


def test_terminal_costate_lq(lq_small):
    # P(T) = q_T x + qbar_T mbar for the LQ cost
    Y = lq_small.Y[:, -1]
    want = Y + 0.5 * (lq_small.weights @ Y)
    assert np.allclose(lq_small.P[:, -1], want, atol=1e-12)


def test_solve_is_bitwise_reproducible(lq_cfg):
    ens = lq_cfg.initial_ensemble(128, 3)
    a = run(lq_cfg.spec, ens, 10, seed=3)
    b = run(lq_cfg.spec, ens, 10, seed=3)
    assert a.P.tobytes() == b.P.tobytes()
    assert a.v_hat.tobytes() == b.v_hat.tobytes()


def test_quadratic_basis_on_quartic(quartic_cfg):
    sol = run(quartic_cfg.spec, quartic_cfg.initial_ensemble(256, 0), 10, basis="quadratic")
    res = residuals(sol.spec, sol)
    assert res["foc_max"] <= 1e-8


def test_plain_picard_matches_anderson(lq_cfg):
    ens = lq_cfg.initial_ensemble(256, 0)
    a = run(lq_cfg.spec, ens, 10)
    b = run(lq_cfg.spec, ens, 10, acceleration="none")
    assert np.max(np.abs(a.P - b.P)) < 1e-9


def test_bad_options():
    with pytest.raises(SolverError):
        SolverOptions(damping=0.0)
    with pytest.raises(SolverError):
        SolverOptions(basis="cubic")
    with pytest.raises(SolverError):
        SolverOptions(picard_tol=-1.0)


def test_feature_jacobian_matches_fd():
    y = np.random.default_rng(0).standard_normal((5, 2))
    J = feature_jacobian("quadratic", y)
    h = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        fd = (features("quadratic", y + e) - features("quadratic", y - e)) / (2 * h)
        assert np.allclose(J[..., a], fd, atol=1e-8)


@pytest.mark.parametrize("name", ["lq_cfg", "quartic_cfg", "det_cfg"])
def test_monotonicity_certificate(name, request):
    cfg = request.getfixturevalue(name)
    out = monotonicity_certificate(cfg.spec, tuples=500)
    assert out["passed"], out["worst"]

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from mfcontrol import ConvexityError, lagrangian, minimize_control, quadratic_plus_quartic
from mfcontrol.hamiltonian import backward_driver, foc, hamiltonian
from mfcontrol.model import LinearDynamics, ProblemSpec, lq_meanfield
from mfcontrol.measure import ParticleEnsemble


def spec_1d(kappa=0.0, r=1.0, b=1.5):
    dyn = LinearDynamics.build(1, 1, f1=[[0.2]], f2=[[0.3]], f3=[[b]], sigma0=[[0.4]])
    cost = lq_meanfield(1, 1, 1.0, 0.5, r, 1.0, 0.5, kappa=kappa)
    return ProblemSpec(dyn, cost, 1.0, 1, 1)


def test_lq_control_closed_form():
    spec = spec_1d(r=2.0, b=1.5)
    p = np.array([[0.4], [-1.0], [2.0]])
    x = np.zeros((3, 1))
    v = minimize_control(spec, x, np.zeros(1), 0.0, p)
    assert np.allclose(v, -1.5 * p / 2.0, atol=1e-14)


def test_lq_hamiltonian_closed_form():
    spec = spec_1d(r=2.0, b=1.5)
    x = np.array([[0.7]])
    m = np.array([0.2])
    p = np.array([[1.1]])
    q = np.array([[[0.3]]])
    H = hamiltonian(spec, x, m, 0.0, p, q).H[0]
    expected = (1.1 * (0.2 * 0.7 + 0.3 * 0.2) + 0.3 * 0.4 - 0.5 * (1.5 * 1.1) ** 2 / 2.0
                + 0.5 * 0.49 + 0.5 * 0.5 * 0.04)
    assert H == pytest.approx(expected, rel=1e-13)


def test_quartic_control_against_root_finder():
    spec = spec_1d(kappa=0.1, b=1.0)
    p = np.linspace(-3, 3, 7)[:, None]
    v = minimize_control(spec, np.zeros((7, 1)), np.zeros(1), 0.0, p)
    for pi, vi in zip(p[:, 0], v[:, 0]):
        root = brentq(lambda u: u + 0.4 * u**3 + pi, -10, 10, xtol=1e-15)
        assert vi == pytest.approx(root, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_hamiltonian_is_infimum(x, p, trial):
    spec = spec_1d(kappa=0.1)
    X, P = np.array([[x]]), np.array([[p]])
    ev = hamiltonian(spec, X, np.array([0.1]), 0.5, P)
    assert ev.H[0] <= lagrangian(spec, X, np.array([0.1]), np.array([[trial]]), 0.5, P, np.zeros((1, 1, 1)))[0] + 1e-12
    assert abs(foc(spec, X, np.array([0.1]), ev.v_hat, 0.5, P, np.zeros((1, 1, 1)))[0, 0]) <= 1e-10


def test_concave_cost_raises():
    spec = spec_1d(r=-1.0)
    with pytest.raises(ConvexityError):
        minimize_control(spec, np.zeros((1, 1)), np.zeros(1), 0.0, np.ones((1, 1)))


def test_lq_driver_includes_mean_term():
    # D_x H + E[D_m H] for the LQ cost: a p + q x + abar E[p] + qbar mbar
    spec = spec_1d()
    x = np.array([[1.0], [3.0]])
    p = np.array([[0.5], [1.5]])
    m = ParticleEnsemble(x)
    v = minimize_control(spec, x, m.mean(), 0.0, p)
    D = backward_driver(spec, m, v, p, np.zeros((2, 1, 1)), 0.0)
    want = 0.2 * p + x + 0.3 * p.mean() + 0.5 * 2.0
    assert np.allclose(D, want, atol=1e-13)

import numpy as np
import pytest

from mfcontrol import gateaux_flow, riccati_oracle, spatial_jacobian
from mfcontrol.bench import LqParams
from mfcontrol.flows import DirectionField, fd_convergence_check
from mfcontrol.errors import CapabilityError, MeasureError


def test_gateaux_flow_is_linear(lq_small):
    rng = np.random.default_rng(0)
    X1, X2 = rng.standard_normal((2, *lq_small.ensemble.states.shape))
    f1, f2 = gateaux_flow(lq_small, X1), gateaux_flow(lq_small, X2)
    f = gateaux_flow(lq_small, 2.0 * X1 - 0.5 * X2)
    assert np.allclose(f.DY, 2.0 * f1.DY - 0.5 * f2.DY, atol=1e-9)
    assert np.allclose(f.DP, 2.0 * f1.DP - 0.5 * f2.DP, atol=1e-9)


def test_gateaux_flow_matches_difference_quotients(lq_small):
    X = np.random.default_rng(1).standard_normal(lq_small.ensemble.states.shape)
    out = fd_convergence_check(lq_small, (1e-2, 1e-3), direction=X)
    assert out["rows"][-1]["relative_error"] <= 1e-2
    assert out["slope"] > 0.8


def test_gateaux_flow_deterministic(det_small):
    X = np.random.default_rng(2).standard_normal(det_small.ensemble.states.shape)
    out = fd_convergence_check(det_small, (1e-2, 1e-3), direction=X)
    assert out["rows"][-1]["relative_error"] <= 1e-3


def test_direction_shape_checked(lq_small):
    with pytest.raises(MeasureError):
        gateaux_flow(lq_small, DirectionField(np.ones((3, 1))))


def test_spatial_jacobian_lq_is_riccati_gain(lq_small):
    # the affine costate has slope Pi(0) in x
    oracle = riccati_oracle(LqParams.from_spec(lq_small.spec), K=lq_small.K)
    sj = spatial_jacobian(lq_small)
    slope = lq_small.weights @ sj.DP[:, 0, 0, 0]
    assert slope == pytest.approx(oracle.Pi[0, 0, 0], rel=0.05)


def test_measure_flow_matches_dirac_quotients(lq_small):
    out = fd_convergence_check(lq_small, (1e-2, 1e-3), xi=[1.5], copies=16)
    assert out["rows"][-1]["relative_error"] <= 1e-2


def test_measure_flow_needs_noise(det_small):
    with pytest.raises(CapabilityError):
        fd_convergence_check(det_small, (1e-2,), xi=[1.5])

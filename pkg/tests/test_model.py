import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfcontrol import ConfigError, SpecificationError, load_config, lq_meanfield, validate_spec
from mfcontrol.model import LinearDynamics, ProblemSpec, diffusion_matrix, eval_drift, problem_from_dict

BASE = {"state_dim": 2, "control_dim": 1, "horizon": 1.0,
        "dynamics": {"f1": [[0.1, 0.0], [0.0, -0.2]], "f3": [[1.0], [0.5]], "sigma0": [[0.3, 0.0], [0.0, 0.3]]},
        "cost": {"kind": "lq_meanfield", "q": 1.0, "qbar": 0.2, "r": 1.0, "q_T": 1.0, "qbar_T": 0.0}}


@pytest.mark.parametrize("name", ["lq.yaml", "quartic.yaml", "deterministic.yaml"])
def test_shipped_configs_validate(name):
    cfg = load_config(name)
    rep = validate_spec(cfg.spec, layers=("solver", "bellman", "master"))
    assert rep.passed, rep.failures()


def test_missing_config_and_bad_keys(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    with pytest.raises(ConfigError):
        problem_from_dict({**BASE, "dynamics": {"f9": 1.0}})
    with pytest.raises(ConfigError):
        problem_from_dict({k: v for k, v in BASE.items() if k != "horizon"})
    with pytest.raises(ConfigError):
        problem_from_dict({**BASE, "cost": {"kind": "lq_meanfield", "q": 1.0}})


def test_error_carries_json_payload():
    with pytest.raises(ConfigError) as info:
        problem_from_dict({**BASE, "cost": {"kind": "mystery"}})
    d = info.value.to_dict()
    assert d["error"] == "ConfigError"
    assert "known" in d["details"]


def test_nonconvex_cost_is_flagged():
    dyn = LinearDynamics.build(1, 1, f3=[[1.0]])
    spec = ProblemSpec(dyn, lq_meanfield(1, 1, 1.0, 0.0, -1.0, 1.0, 0.0), 1.0, 1, 1)
    rep = validate_spec(spec)
    assert not rep.passed
    assert "B3_convexity" in [c.name for c in rep.failures()]


def test_horizon_must_be_positive():
    dyn = LinearDynamics.build(1, 1, f3=[[1.0]])
    with pytest.raises(SpecificationError):
        ProblemSpec(dyn, lq_meanfield(1, 1, 1.0, 0.0, 1.0, 1.0, 0.0), 0.0, 1, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.integers(0, 2**31))
def test_drift_is_affine(lam, seed):
    spec = problem_from_dict(BASE).spec
    rng = np.random.default_rng(seed)
    x1, x2, m1, m2 = rng.standard_normal((4, 3, 2))
    v1, v2 = rng.standard_normal((2, 3, 1))
    mix = lambda a, b: lam * a + (1 - lam) * b
    lhs = eval_drift(spec, mix(x1, x2), mix(m1, m2), mix(v1, v2), 0.3)
    rhs = mix(eval_drift(spec, x1, m1, v1, 0.3), eval_drift(spec, x2, m2, v2, 0.3))
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_sigma_column_convention():
    # row j of sigma0 is the column driven by W^j
    s0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    dyn = LinearDynamics.build(2, 1, f3=[[1.0], [0.0]], sigma0=s0)
    spec = ProblemSpec(dyn, lq_meanfield(2, 1, 1.0, 0.0, 1.0, 1.0, 0.0), 1.0, 2, 1)
    S = diffusion_matrix(spec, np.zeros((1, 2)), np.zeros(2), np.zeros((1, 1)), 0.0)
    assert np.array_equal(S[0, :, 0], s0[0])
    assert np.array_equal(S[0, :, 1], s0[1])


def test_scalar_coefficients_fail_validation():
    dyn = LinearDynamics.build(1, 1, f3=1.0)
    spec = ProblemSpec(dyn, lq_meanfield(1, 1, 1.0, 0.0, 1.0, 1.0, 0.0), 1.0, 1, 1)
    assert [c.name for c in validate_spec(spec).failures()] == ["dimensions"]


def test_drift_shape_errors():
    spec = problem_from_dict(BASE).spec
    with pytest.raises(SpecificationError):
        eval_drift(spec, np.zeros((3, 3)), np.zeros(2), np.zeros((3, 1)), 0.0)
    with pytest.raises(SpecificationError):
        eval_drift(spec, np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2)), 0.0)

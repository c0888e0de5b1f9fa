import math

import numpy as np
import pytest

from mfcontrol import CapabilityError, ParticleEnsemble, SpecificationError, riccati_oracle, run_lq_benchmark
from mfcontrol import convergence_study, shooting_oracle
from mfcontrol.bench import LqParams, deterministic_benchmark, lq_spec

from conftest import run

# independent scipy solve_ivp (rtol 1e-12) of the frozen lq.yaml instance
FROZEN_PI0 = 1.1882541001906015
FROZEN_GAMMA0 = 1.7970375276252286
FROZEN_CHI0 = 0.5606822824600017


def test_closed_form_scalar_riccati():
    # a = 0, b = r = q_T = 1, q = 0: Pi(t) = 1 / (2 - t), chi(0) = c^2 log(2) / 2
    o = riccati_oracle(LqParams.build(c=0.6, q_T=1.0), K=20)
    assert o.Pi[0, 0, 0] == pytest.approx(0.5, abs=1e-11)
    assert np.allclose(o.Pi[:, 0, 0], 1.0 / (2.0 - o.t), atol=1e-11)
    assert np.allclose(o.Gamma, o.Pi, atol=1e-13)
    assert float(o.chi[0]) == pytest.approx(0.18 * math.log(2.0), abs=1e-11)


def test_frozen_instance(lq_cfg):
    o = riccati_oracle(LqParams.from_spec(lq_cfg.spec))
    assert o.Pi[0, 0, 0] == pytest.approx(FROZEN_PI0, abs=1e-9)
    assert o.Gamma[0, 0, 0] == pytest.approx(FROZEN_GAMMA0, abs=1e-9)
    assert float(o.chi[0]) == pytest.approx(FROZEN_CHI0, abs=1e-9)
    assert o.residual <= 1e-10


def test_zero_cost_gives_zero_value(scalar_lq):
    p, spec = scalar_lq(a=0.3, c=0.5)
    ens = ParticleEnsemble.gaussian(256, [1.0], [0.5])
    assert riccati_oracle(p).value(ens) == pytest.approx(0.0, abs=1e-14)
    sol = run(spec, ens, 10)
    assert np.max(np.abs(sol.v_hat)) < 1e-12


def test_uncontrolled_value_closed_form(scalar_lq):
    # b = 0: X_t = X_0 + c W_t, so E X_t^2 = E X_0^2 + c^2 t
    p, spec = scalar_lq(b=0.0, c=0.8, q=1.0, qbar=0.4, q_T=2.0, qbar_T=0.3)
    ens = ParticleEnsemble.gaussian(4096, [0.7], [0.5], seed=1)
    m2, mb = ens.second_moment(), ens.mean()[0]
    exact = 0.5 * (m2 + 0.64 / 2) + 0.5 * 0.4 * mb**2 + 0.5 * 2.0 * (m2 + 0.64) + 0.5 * 0.3 * mb**2
    assert riccati_oracle(p).value(ens) == pytest.approx(exact, rel=1e-10)
    from mfcontrol.analysis import solution_value

    sol = run(spec, ens, 50)
    assert solution_value(sol) == pytest.approx(exact, rel=0.03)


def test_from_spec_rejects_quartic(quartic_cfg):
    with pytest.raises(CapabilityError):
        LqParams.from_spec(quartic_cfg.spec)


def test_bad_control_weight():
    with pytest.raises(SpecificationError):
        LqParams.build(r=0.0)


def test_shooting_matches_riccati_feedback(scalar_lq):
    p, spec = scalar_lq(a=0.2, abar=0.3, q=1.0, qbar=0.5, q_T=1.0, qbar_T=0.5)
    ens = ParticleEnsemble(np.linspace(0.0, 2.0, 6))
    sh = shooting_oracle(spec, ens, 400)
    assert sh.boundary_residual <= 1e-10
    o = riccati_oracle(p, K=400)
    want = o.feedback(0.0, ens.states, ens.mean())
    assert np.allclose(sh.v[:, 0], want, atol=1e-6)


def test_deterministic_benchmark_small(det_cfg):
    rep = deterministic_benchmark(det_cfg.spec, det_cfg.initial_ensemble(8, 0), K=100)
    assert rep.shooting_residual <= 1e-10
    assert rep.control_rms < 5e-3


def test_lq_benchmark_small(lq_cfg):
    rep = run_lq_benchmark(LqParams.from_spec(lq_cfg.spec), N=1024, K=25, seeds=(0,), mean0=(1.0,), std0=(0.5,))
    assert rep.rows[0].value_error < 0.05
    assert rep.rows[0].feedback_error < 0.1


def test_convergence_study_shapes(lq_cfg):
    # cross design: N sweep at the finest K, K sweep at the largest N
    oracle = riccati_oracle(LqParams.from_spec(lq_cfg.spec)).value
    out = convergence_study(lq_cfg.spec, [128, 256], [5, 10], seeds=(0,), initial=lq_cfg.initial_ensemble,
                            oracle=oracle)
    assert [(r["N"], r["K"]) for r in out["rows"]] == [(128, 10), (256, 5), (256, 10)]
    assert out["reference"] == "oracle"
    assert all(np.isfinite(r["rms"]) for r in out["rows"])

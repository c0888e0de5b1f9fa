import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfcontrol import MeasureError, ParticleEnsemble, perturb_dirac, pushforward, wasserstein2
from mfcontrol.measure import metric_property_check, resample_copy

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def ensembles(n=1, max_size=8):
    return st.integers(1, max_size).flatmap(
        lambda N: arrays(np.float64, (N, n), elements=finite).map(ParticleEnsemble))


def brute_w2(a, b):
    # uniform, equal size: best of all permutations
    best = min(sum(np.sum((a.states[i] - b.states[j]) ** 2) for i, j in enumerate(p))
               for p in itertools.permutations(range(b.size)))
    return math.sqrt(best / a.size)


def test_rejects_bad_weights():
    with pytest.raises(MeasureError):
        ParticleEnsemble(np.zeros((3, 1)), [0.5, 0.5, 0.5])
    with pytest.raises(MeasureError):
        ParticleEnsemble(np.zeros((3, 1)), [0.5, 0.5])


def test_one_d_quantile_matches_sorted_pairing():
    a = ParticleEnsemble(np.array([[0.0], [3.0], [1.0]]))
    b = ParticleEnsemble(np.array([[2.0], [-1.0], [5.0]]))
    # sorted pairs (0,-1), (1,2), (3,5)
    assert wasserstein2(a, b) == pytest.approx(math.sqrt((1 + 1 + 4) / 3))


def test_weighted_one_d_point_masses():
    a = ParticleEnsemble([[0.0], [1.0]], [0.25, 0.75])
    b = ParticleEnsemble([[0.0]])
    assert wasserstein2(a, b) == pytest.approx(math.sqrt(0.75))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_assignment_matches_brute_force(N, seed):
    rng = np.random.default_rng(seed)
    a = ParticleEnsemble(rng.standard_normal((N, 2)))
    b = ParticleEnsemble(rng.standard_normal((N, 2)))
    assert wasserstein2(a, b) == pytest.approx(brute_w2(a, b), rel=1e-12, abs=1e-12)


def test_transport_lp_agrees_with_split_atoms():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 2)), rng.standard_normal((4, 2))
    a = ParticleEnsemble(x, [0.5, 0.5])
    b = ParticleEnsemble(y)
    # same measure as four equal atoms, solved by assignment
    a4 = ParticleEnsemble(np.repeat(x, 2, axis=0))
    assert wasserstein2(a, b) == pytest.approx(wasserstein2(a4, b), rel=1e-9)


def test_entropic_path_close_to_exact():
    rng = np.random.default_rng(1)
    a = ParticleEnsemble(rng.standard_normal((40, 2)))
    b = ParticleEnsemble(rng.standard_normal((40, 2)) + 1.0)
    exact = wasserstein2(a, b)
    approx = wasserstein2(a, b, cap=10, return_info=True)
    assert approx.method == "entropic"
    assert approx.value == pytest.approx(exact, rel=0.05)


@settings(max_examples=60, deadline=None)
@given(ensembles(), ensembles(), ensembles())
def test_metric_axioms(a, b, c):
    dab, dbc, dac = wasserstein2(a, b), wasserstein2(b, c), wasserstein2(a, c)
    assert wasserstein2(a, a) <= 1e-12
    assert dab == wasserstein2(b, a)
    assert dab >= 0
    assert dac <= dab + dbc + 1e-9 * (1 + dab + dbc)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31))
def test_coupling_bound(N, seed):
    rng = np.random.default_rng(seed)
    m = ParticleEnsemble(rng.standard_normal((N, 2)))
    X, X2 = rng.standard_normal((2, N, 2))
    lhs = wasserstein2(m.with_states(X), m.with_states(X2))
    assert lhs <= math.sqrt(np.mean(np.sum((X - X2) ** 2, axis=1))) + 1e-9


def test_metric_property_check_small():
    out = metric_property_check(samples=150, seed=4)
    assert out["passed"], out["failures"]


def test_dirac_mixture_mass_and_mean():
    m = ParticleEnsemble(np.array([[0.0], [2.0]]))
    p = perturb_dirac(m, [4.0], 0.1)
    e = p.materialize(5)
    assert e.size == 7
    assert e.weights.sum() == pytest.approx(1.0)
    assert e.mean() == pytest.approx(p.mean())
    assert p.mean()[0] == pytest.approx(0.9 * 1.0 + 0.4)
    with pytest.raises(MeasureError):
        perturb_dirac(m, [4.0], 1.0)


def test_pushforward_keeps_weights():
    m = ParticleEnsemble([[1.0], [2.0]], [0.3, 0.7])
    out = pushforward(m, lambda x: 2 * x + 1)
    assert np.allclose(out.states[:, 0], [3.0, 5.0])
    assert np.array_equal(out.weights, m.weights)


def test_resample_copy_is_seeded():
    m = ParticleEnsemble.gaussian(50, [0.0], [1.0], seed=2)
    assert np.array_equal(resample_copy(m, 5).states, resample_copy(m, 5).states)
    assert not np.array_equal(resample_copy(m, 5).states, resample_copy(m, 6).states)

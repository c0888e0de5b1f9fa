import numpy as np
import pytest

from mfcontrol import GridError, make_grid, sample_increments


def test_grid_endpoints():
    g = make_grid(0.25, 1.0, 3)
    assert g.knots[0] == 0.25 and g.knots[-1] == 1.0
    assert np.allclose(g.dt, 0.25)
    with pytest.raises(GridError):
        make_grid(1.0, 1.0, 3)
    with pytest.raises(GridError):
        make_grid(0.0, 1.0, 0)


def test_increments_independent_of_jobs():
    g = make_grid(0.0, 1.0, 10)
    a = sample_increments(g, 37, 2, seed=9, jobs=1)
    b = sample_increments(g, 37, 2, seed=9, jobs=4)
    assert a.increments.tobytes() == b.increments.tobytes()


def test_stream_offset_extends_the_same_streams():
    g = make_grid(0.0, 1.0, 5)
    big = sample_increments(g, 20, 1, seed=1)
    tail = sample_increments(g, 5, 1, seed=1, stream_offset=15)
    assert np.array_equal(big.increments[15:], tail.increments)


def test_increment_variance():
    g = make_grid(0.0, 2.0, 4)
    inc = sample_increments(g, 20000, 1, seed=0).increments
    assert np.var(inc[:, :, 0], axis=0) == pytest.approx(np.full(4, 0.5), rel=0.05)


def test_tail_and_take():
    g = make_grid(0.0, 1.0, 6)
    b = sample_increments(g, 4, 1, seed=0)
    assert b.tail(2).increments.shape == (4, 4, 1)
    assert np.array_equal(b.take([1, 3]).stream_ids, [1, 3])

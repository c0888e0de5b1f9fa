import numpy as np
import pytest

from mfcontrol import ParticleEnsemble, SolverOptions, load_config, make_grid, sample_increments, solve
from mfcontrol.bench import LqParams, lq_spec


def run(spec, ens, K, seed=0, **opts):
    grid = make_grid(0.0, spec.T, K)
    bundle = sample_increments(grid, ens.size, spec.n, seed)
    return solve(spec, ens, grid, bundle, SolverOptions(seed=seed, **opts))


@pytest.fixture(scope="session")
def lq_cfg():
    return load_config("lq.yaml")


@pytest.fixture(scope="session")
def det_cfg():
    return load_config("deterministic.yaml")


@pytest.fixture(scope="session")
def quartic_cfg():
    return load_config("quartic.yaml")


@pytest.fixture(scope="session")
def lq_small(lq_cfg):
    """Small stochastic LQ solve shared by the cheap tests."""
    return run(lq_cfg.spec, lq_cfg.initial_ensemble(512, 0), 20)


@pytest.fixture(scope="session")
def det_small(det_cfg):
    return run(det_cfg.spec, det_cfg.initial_ensemble(16, 0), 50)


@pytest.fixture
def scalar_lq():
    def make(**kw):
        p = LqParams.build(**kw)
        return p, lq_spec(p)
    return make


ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

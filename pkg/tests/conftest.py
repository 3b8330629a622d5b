import numpy as np
import pytest

from coadapt.policy import AdapterState, PolicySpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec(rng):
    return PolicySpec(rng.normal(size=(6, 4)), rank=2, R_x=10.0, R_theta=10.0)


def random_lowrank(spec, rng, scale=0.5):
    return AdapterState(A=rng.normal(scale=scale, size=(spec.V, spec.rank)),
                        B=rng.normal(scale=scale, size=(spec.rank, spec.d)))


def random_simplex(rng, V):
    p = rng.exponential(size=V)
    return p / p.sum()


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)

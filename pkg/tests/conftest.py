import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def blobs_problem(n=300, d=6, c=3, p=40, spread=0.3, seed=0):
    from eigenpro4.data import synth_blobs

    ds = synth_blobs(n, d, c, spread=spread, seed=seed)
    Z = ds.X[np.sort(np.random.default_rng([seed, 5]).choice(n, p, replace=False))]
    return ds, Z


_ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    """Record ``(criterion, passed, text)``; the lines are echoed in the terminal summary."""
    def record(number, name, passed, text):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {name}: {text}"
        print(line)
        _ACCEPTANCE.append((number, line))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)

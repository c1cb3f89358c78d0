import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from proxmed.data import Dataset
from proxmed.sim import DgpCoefficients, generate

settings.register_profile("proxmed", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("proxmed")


@pytest.fixture(scope="session")
def coef():
    return DgpCoefficients()


@pytest.fixture(scope="session")
def sim1000(coef):
    d, _ = generate(coef, 1000, 11)
    return d


@pytest.fixture(scope="session")
def sim_large(coef):
    d, _ = generate(coef, 100_000, 2024)
    return d


def make_dataset(n=50, seed=0, p_x=2):
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < 0.5).astype(float)
    a[0], a[1] = 0.0, 1.0
    return Dataset(
        y=rng.normal(size=n),
        a=a,
        m=rng.normal(size=n),
        x=rng.normal(size=(n, p_x)),
        w=rng.normal(size=(n, 1)),
        z=rng.normal(size=(n, 1)),
    )


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def accept(request):
    """Record one PASS/FAIL line for the acceptance summary and return the flag."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(label, ok, detail=""):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

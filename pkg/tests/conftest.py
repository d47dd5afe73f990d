import numpy as np
import pytest
from hypothesis import settings

from mgtwr import Dataset, KernelSpec

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def make_dataset(n=120, K=3, seed=0, coef=None, noise=0.5, t_max=365.0):
    """Small synthetic dataset with smooth spatially varying coefficients."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 1, (n, 2))
    times = rng.integers(1, int(t_max) + 1, n).astype(float)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, K - 1))])
    if coef is None:
        u, v = coords.T
        B = np.column_stack([1 + u + v] + [np.sin(np.pi * (k + 1) * u) + v for k in range(K - 1)])
    else:
        B = np.tile(np.asarray(coef, dtype=float), (n, 1))
    y = (X * B).sum(axis=1) + noise * rng.standard_normal(n)
    return Dataset(coords, times, X, y)


@pytest.fixture
def small_ds():
    return make_dataset()


@pytest.fixture
def st_spec():
    return KernelSpec()


@pytest.fixture
def spatial_spec():
    return KernelSpec(temporal_family=None)


ACCEPTANCE = {}


def record_acceptance(criterion: str, ok: bool, detail: str = "") -> bool:
    """Store and print a one-line verdict for an acceptance criterion."""
    line = f"{criterion}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])

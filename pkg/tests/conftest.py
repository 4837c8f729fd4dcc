import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vcmm import ClusterDataset, SimConfig, generate_dataset

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record a pass/fail line for an acceptance criterion."""

    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def sim_default():
    return SimConfig()


@pytest.fixture(scope="session")
def sim_data(sim_default):
    return generate_dataset(sim_default, seed=2024)


def random_dataset(rng, m=None, p=None, q=None, n_max=50, size_range=(3, 9)):
    """Small random clustered dataset (independent of the simulation module)."""
    p = rng.integers(1, 3) if p is None else p
    q = rng.integers(0, 2) if q is None else q
    m = rng.integers(2, 7) if m is None else m
    sizes = rng.integers(size_range[0], size_range[1] + 1, size=m)
    while sizes.sum() > n_max:
        sizes[np.argmax(sizes)] -= 1
    n = int(sizes.sum())
    x = rng.normal(size=(n, p))
    z = rng.normal(size=(m, q))
    u = rng.uniform(0, 1, n)
    y = rng.normal(size=n)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return ClusterDataset(y, u, x, z, offsets, tuple(f"c{i}" for i in range(m)))

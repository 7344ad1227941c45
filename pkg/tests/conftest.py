import numpy as np
import pytest

from ssotr.data_model import Dataset
from ssotr.simulation import SimConfig, generate_replication


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_ds(rng):
    """Model-1-like data, small enough for exact oracles."""
    n, N = 60, 80
    x = rng.standard_normal((n + N, 2))
    a = (rng.random(n + N) < 1 / (1 + np.exp(-(0.5 * x[:, 0] - 0.5 * x[:, 1])))).astype(int)
    y = (0.5 * x.sum(axis=1)) ** 3 + a * x.sum(axis=1) + rng.standard_normal(n + N)
    return Dataset(x[:n], a[:n], y[:n], x[n:])


@pytest.fixture(scope="session")
def sim_ds():
    cfg = SimConfig(n=300, N=1500, replications=1, seed=5, mc_truth_size=5000)
    return generate_replication(cfg, 0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])

import warnings

import numpy as np
import pytest

from romflow.flow import build_model

warnings.filterwarnings("ignore", message=".*TBB.*")


def random_model(n=3, L=2, H1=6, H2=5, seed=0, partition="first_half", a_range=(0.6, 1.5), **kw):
    """Small model with non-trivial scale-bias and output layers."""
    rng = np.random.default_rng(seed)
    m = build_model(n, L, H1, H2, partition, rng=rng, output_init_std=0.4, **kw)
    for layer in m.layers:
        layer.params["a"][:] = rng.uniform(*a_range, n) * rng.choice([-1, 1], n)
        layer.params["b"][:] = rng.normal(0, 0.3, n)
        layer.params["bout"][:] = rng.normal(0, 0.2, layer.params["bout"].shape)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: list[str] = []


def record_criterion(number, ok, detail):
    CRITERIA.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)

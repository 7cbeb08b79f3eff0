"""Shared fixtures. Expensive objects are session scoped and built at reduced
resolution; the acceptance module builds its own full-resolution objects."""

import numpy as np
import pytest

from hypoheat.fields import example
from hypoheat.kernel import EllipticMatrix, GridConfig, ProjectedKernel, solve_lifted_kernel
from hypoheat.lift import build_lift
from hypoheat.metric import MetricOracle


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running numerical checks")


@pytest.fixture(scope="session")
def grushin():
    return example("grushin")


@pytest.fixture(scope="session")
def grushin_lift(grushin):
    return build_lift(grushin)


@pytest.fixture(scope="session")
def grushin_oracle(grushin):
    return MetricOracle(grushin)


@pytest.fixture(scope="session")
def euclid():
    return example("euclidean")


@pytest.fixture(scope="session")
def euclid_oracle(euclid):
    return MetricOracle(euclid)


@pytest.fixture(scope="session")
def small_cfg():
    return GridConfig(active_nodes=97, passive_nodes=(128, 32))


@pytest.fixture(scope="session")
def grushin_kernel(grushin_lift, small_cfg):
    """Projected Grushin kernel for A = I at test resolution."""
    lk = solve_lifted_kernel(grushin_lift, EllipticMatrix(np.eye(2), 4.0), small_cfg)
    return ProjectedKernel(lk)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LOG", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

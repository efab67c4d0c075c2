import numpy as np
import pytest

from grouprev.scenes import EnvConfig, generate_dataset
from oracles import ACCEPTANCE, random_box, random_point  # noqa: F401


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_env():
    return EnvConfig(grid=3, scales=(0.3,), max_objects=2, max_slots=2)


@pytest.fixture(scope="session")
def hard_scenes():
    return generate_dataset(5, 40, "hard")


@pytest.fixture(scope="session")
def easy_scenes():
    return generate_dataset(6, 40, "easy")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

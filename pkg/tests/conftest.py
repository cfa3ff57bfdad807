import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sdd.diffusion import DenoiserConfig, init_denoiser, make_schedule, train_denoiser
from sdd.numerics import RngStream, init_mlp
from sdd.worlds import make_world

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_LINES[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        name, passed, detail = ACCEPTANCE_LINES[k]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {k:>2}. {name}: {detail}")


@pytest.fixture
def rng():
    return RngStream(20240607)


@pytest.fixture(scope="session")
def two_mode():
    return make_world("two-mode", 2, 4.0, 0.3, 2)


@pytest.fixture(scope="session")
def ring():
    return make_world("ring", 8, 2.0, 0.25, 8)


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(100, 1e-4, 0.02)


@pytest.fixture
def small_net():
    return init_mlp([3, 5, 4, 2], RngStream(7))


@pytest.fixture(scope="session")
def random_denoiser():
    """Untrained but non-trivial denoiser on a short schedule."""
    s = make_schedule(10, 1e-3, 0.2)
    cfg = DenoiserConfig(hidden=16, n_hidden=2, frequencies=3, cond_dim=4)
    return init_denoiser(4, 3, s, cfg, RngStream(11)), s


@pytest.fixture(scope="session")
def quick_two_mode_teacher(two_mode, schedule):
    """Briefly trained teacher for tests that need some signal, not quality."""
    return train_denoiser(two_mode, schedule, DenoiserConfig(iterations=600), RngStream(5))


@pytest.fixture(scope="session")
def two_mode_teacher(two_mode, schedule):
    """Default-config teacher on the two-mode world."""
    return train_denoiser(two_mode, schedule, DenoiserConfig(), RngStream(1))


@pytest.fixture(scope="session")
def ring_teacher(ring, schedule):
    """Default-config teacher on the ring world."""
    return train_denoiser(ring, schedule, DenoiserConfig(), RngStream(1))


def assert_close(a, b, rel=1e-12, abs_=0.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    assert np.allclose(a, b, rtol=rel, atol=abs_), f"max gap {np.max(np.abs(a - b))}"

from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fluxcal.device import DeviceConfig, SimulatedDevice

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

#: acceptance outcomes, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture(scope="session")
def preset3() -> DeviceConfig:
    return DeviceConfig.preset("paper-3loop")


@pytest.fixture
def device3(preset3) -> SimulatedDevice:
    return SimulatedDevice(preset3)


def random_well_conditioned(rng: np.random.Generator, n: int, max_cond: float = 100.0) -> np.ndarray:
    while True:
        a = np.eye(n) + rng.uniform(-0.4, 0.4, (n, n))
        if np.linalg.cond(a) < max_cond:
            return a

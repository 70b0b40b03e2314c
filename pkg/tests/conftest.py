import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from ecobnb.vehicle import default_vehicle  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def p():
    return default_vehicle()


@pytest.fixture(scope="session", autouse=True)
def _warm_kernel():
    """Load (or compile) the compiled kernel once, outside any timed test."""
    from ecobnb.route import generate_route, resample, tighten_bounds
    from ecobnb.ocp import SolverConfig
    from ecobnb.heuristic import build_lut
    from ecobnb.warmstart import generate
    from ecobnb.bnb import solve

    veh = default_vehicle()
    cfg = SolverConfig(N=8)
    h = tighten_bounds(resample(generate_route("hill", 1000.0), 0.0, 8, 25.0), veh)
    warm = generate(20.0, h, cfg, veh)
    solve(warm, 20.0, h, build_lut(h, cfg, veh), cfg, veh)


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(criterion, passed, detail)``."""
    def record(criterion: int, passed: bool, detail: str):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

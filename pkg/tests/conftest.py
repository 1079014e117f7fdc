import os

import pytest
from hypothesis import HealthCheck, settings

from padforge.models import init_params
from padforge.numerics import make_rng

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


@pytest.fixture
def acceptance_record():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def small_models():
    """Random MLP and ICNN over d=6 with width 8."""
    d = 6
    mlp = init_params("mlp", d, (8, 8), rng=make_rng(11))
    icnn = init_params("icnn", d, (8, 8), rng=make_rng(12))
    return d, mlp, icnn

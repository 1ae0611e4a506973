import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("qslq", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qslq")

_CRITERIA: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line; the lines are printed in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        _CRITERIA.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20261016))

import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SUITE_LIMIT_S = 600.0
_RESULTS: dict[int, tuple[bool, str]] = {}
_START = time.perf_counter()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        _RESULTS[number] = (ok, detail)

    return record


def pytest_sessionfinish(session, exitstatus):
    if not _RESULTS:
        return
    elapsed = time.perf_counter() - _START
    ok = elapsed < SUITE_LIMIT_S
    prev_ok, prev_detail = _RESULTS.get(7, (True, ""))
    detail = f"{prev_detail}; full suite {elapsed:.0f}s (limit {SUITE_LIMIT_S:.0f}s)".lstrip("; ")
    _RESULTS[7] = (prev_ok and ok, detail)
    if not ok and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest

# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE: list = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    def report(number: int, passed: bool, detail: str):
        ACCEPTANCE.append((number, passed, detail))
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

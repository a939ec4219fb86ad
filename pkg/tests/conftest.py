import numpy as np
import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split("-")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")

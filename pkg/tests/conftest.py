import pytest

from acceptance_suites import run_cycle, run_recovery, run_sine

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def recovery_run():
    return run_recovery()


@pytest.fixture(scope="session")
def sine_run():
    return run_sine()


@pytest.fixture(scope="session")
def ellipse_run():
    return run_cycle("ellipse")


@pytest.fixture(scope="session")
def circle_run():
    return run_cycle("circle")

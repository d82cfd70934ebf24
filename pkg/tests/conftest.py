import pytest

from _support import ACCEPTANCE, lq_setup


@pytest.fixture(scope="session")
def canon_lq():
    """CANON-LQ at n=128, M=10^4: config, problem, Riccati oracle, noise."""
    return lq_setup()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])

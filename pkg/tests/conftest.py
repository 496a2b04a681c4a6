import pytest

from spsqkd.simulator import reference_scenario, simulate_bb84

REFERENCE_PULSES = 50_000_000


@pytest.fixture(scope="session")
def reference_params():
    return reference_scenario()


@pytest.fixture(scope="session")
def reference_runs(reference_params):
    """Four 10 s input-state runs of the WSe2-like reference scenario."""
    return simulate_bb84(reference_params, REFERENCE_PULSES, seed=20230917)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

import pytest

from rvs import bench

VARIANCE_TRIALS = 10_000


@pytest.fixture(scope="session")
def variance_table():
    """Full variance study on the calibrated scenes, keyed by (field, estimator, k)."""
    rows = bench.variance_study(trials=VARIANCE_TRIALS, seed=0)
    return {(r.field, r.estimator, r.k): r for r in rows}


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

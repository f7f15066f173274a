import numpy as np
import pytest

from holdsense import simchan
from holdsense.pipeline import Pipeline, simulate_dataset
from holdsense.signal import SignalSpec


@pytest.fixture(scope="session")
def note5():
    return simchan.get_device("note5")


@pytest.fixture(scope="session")
def office():
    return simchan.get_environment("office")


@pytest.fixture(scope="session")
def quiet():
    """Office room with negligible noise, for deterministic physics checks."""
    return simchan.Environment("quiet", 200.0, ())


@pytest.fixture(scope="session")
def pipe3():
    return Pipeline(SignalSpec(n_chirps=3))


@pytest.fixture(scope="session")
def small_cohort():
    return simchan.make_hand_cohort(6, 11)


@pytest.fixture(scope="session")
def small_data(small_cohort, note5, office, pipe3):
    """6 users x 12 three-chirp holds: small enough for per-module tests."""
    return simulate_dataset(small_cohort, note5, office, pipe3, 12, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion after the run

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[key]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {key:2d}: {verdict}  {detail}")

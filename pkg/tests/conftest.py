from __future__ import annotations

import numpy as np
import pytest

from hemaflow import constant_rate, make_model, saturating_rate, affine_rate

# Acceptance tests (tests/test_acceptance.py) each cover one sign-off
# criterion; collect their outcomes and print a one-line verdict per
# criterion at the end of the run.
_ACCEPTANCE_DOCS: dict[str, str] = {}
_ACCEPTANCE_REPORTS: dict[str, object] = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        if "test_acceptance.py" not in item.nodeid:
            continue
        doc = (item.function.__doc__ or "").strip().splitlines()
        _ACCEPTANCE_DOCS[item.nodeid] = doc[0] if doc else item.name


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    # keep the worst phase: a setup error must not read as a pass
    if report.when == "call" or report.failed:
        prior = _ACCEPTANCE_REPORTS.get(report.nodeid)
        if prior is None or report.failed:
            _ACCEPTANCE_REPORTS[report.nodeid] = report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_REPORTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_REPORTS):
        report = _ACCEPTANCE_REPORTS[nodeid]
        verdict = "PASS" if report.passed else "FAIL"
        terminalreporter.write_line(
            f"{verdict}  {_ACCEPTANCE_DOCS.get(nodeid, nodeid)}")


@pytest.fixture(scope="session")
def baseline_model():
    """Constant-rate model used throughout: r=0.015, m=0.02, d=0.005."""
    return make_model(constant_rate(0.015), constant_rate(0.02), 0.005)


@pytest.fixture(scope="session")
def feedback_model():
    """Feedback model: division inhibited by the mature pool, maturation
    speeding up with it.  Exercises every z-dependent code path."""
    return make_model(saturating_rate(0.05, 2.0, 0.01),
                      affine_rate(0.02, 0.0, 0.005, 0.5), 0.01)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260817)

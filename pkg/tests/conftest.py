import numpy as np
import pytest

from lightvit import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=True):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# Acceptance outcomes collected by tests/test_acceptance.py, printed at session end.
ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance_id", None)
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    status = "PASS" if report.passed else "FAIL"
    ACCEPTANCE_RESULTS[marker[0]] = (status, marker[1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report.acceptance_id = (m.args[0], m.args[1])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")

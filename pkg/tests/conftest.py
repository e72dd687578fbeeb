import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_outcomes: dict[tuple[int, str], list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "criterion", None)
    if marker is not None:
        _outcomes.setdefault(marker, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), results in sorted(_outcomes.items()):
        status = "PASS" if all(r == "passed" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")

"""Per-criterion pass/fail lines for the acceptance suite.

Acceptance tests carry ``@pytest.mark.criterion("name")``; a criterion fails
when any of its tests fail and is skipped only when all of its tests skip.
"""
import pytest

_outcomes: dict = {}
_order: list = []


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark and mark.args[0] not in _order:
            _order.append(mark.args[0])


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.skipped or report.failed):
        return
    name = report.__dict__.get("criterion")
    if name is None:
        return
    _outcomes.setdefault(name, []).append("skipped" if report.skipped else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark:
        outcome.get_result().criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _order:
        return
    terminalreporter.section("acceptance criteria")
    for name in _order:
        results = _outcomes.get(name, [])
        if not results:
            status = "NOT RUN"
        elif "failed" in results:
            status = "FAIL"
        elif all(r == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"{status:<8}{name}")

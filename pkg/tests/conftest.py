from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"

_criteria: dict[int, dict] = {}


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def no_sleep(monkeypatch):
    monkeypatch.setattr("ragbench.transport.time.sleep", lambda s: None)


def pytest_runtest_logreport(report):
    item_criterion = getattr(report, "criterion", None)
    if item_criterion is None:
        return
    n, title = item_criterion
    entry = _criteria.setdefault(n, {"title": title, "outcome": "PASS"})
    if report.when == "call" or report.outcome != "passed":
        if report.outcome == "failed":
            entry["outcome"] = "FAIL"
        elif report.outcome == "skipped" and entry["outcome"] == "PASS":
            entry["outcome"] = "SKIP"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = (marker.args[0], marker.kwargs.get("title", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        c = _criteria[n]
        terminalreporter.write_line(f"[{c['outcome']}] criterion {n}: {c['title']}")

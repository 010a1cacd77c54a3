"""Acceptance reporting: one PASS/FAIL line per numbered criterion after the run."""

import time

import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture
def measure(request):
    """Record measured magnitudes; they are echoed next to the criterion's verdict."""
    notes = []
    request.node.user_properties.append(("measured", notes))
    start = time.perf_counter()
    yield notes.append
    notes.append(f"{time.perf_counter() - start:.1f}s")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call", "teardown"):
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "failed": False, "ran": False, "notes": []})
    if report.failed:
        entry["failed"] = True
    if report.when == "call":
        entry["ran"] = entry["ran"] or report.passed
    if report.when == "teardown":
        for key, notes in item.user_properties:
            if key == "measured":
                entry["notes"].extend(notes)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        verdict = "PASS" if entry["ran"] and not entry["failed"] else "FAIL"
        detail = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number} {verdict}: {entry['title']}  [{detail}]")

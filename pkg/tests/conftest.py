"""Collects per-criterion outcomes from the acceptance suite and prints a summary."""

import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": False, "details": []})
    entry["failed"] |= rep.failed
    entry["details"] += [str(v) for k, v in rep.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "FAIL" if entry["failed"] else "PASS"
        detail = "; ".join(entry["details"])
        line = f"criterion {number}: {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))

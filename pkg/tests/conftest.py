import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    entry = _criteria.setdefault(name, {"passed": True, "ran": False, "seconds": 0.0})
    if report.when == "call":
        entry["ran"] = True
        entry["seconds"] += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, e in _criteria.items():
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({e['seconds']:.1f}s)")

"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import re

_CRITERIA = {}
DETAILS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(n, (m.group(2), "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        _CRITERIA[n] = (m.group(2), status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, status = _CRITERIA[n]
        detail = DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d} {name.replace('_', ' ')}: {status}" + (f"  [{detail}]" if detail else ""))

"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

CRITERIA = {
    1: "oracle equivalence",
    2: "decomposition exactness",
    3: "efficiency axiom",
    4: "feature ranges",
    5: "optimizer contracts",
    6: "in-sample MSE direction",
    7: "valuation quality direction",
    8: "cost structure",
    9: "determinism",
}

_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.failed:
        _results[n] = ("FAIL", detail or report.when + " failed")
    elif report.when == "call" and n not in _results:
        _results[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _results:
            status, detail = _results[n]
            terminalreporter.write_line(f"C{n} {status} {name}: {detail}")
        else:
            terminalreporter.write_line(f"C{n} NOT RUN {name}")

"""Shared fixtures and the acceptance-criteria summary printer."""

from __future__ import annotations

import re

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION_RE.search(report.nodeid)
    if m and report.when == "call":
        label = f"criterion {int(m.group(1)):2d} ({m.group(2)})"
        _results[label] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for label in sorted(_results):
        terminalreporter.write_line(f"{label}: {_results[label]}")

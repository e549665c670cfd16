"""Test-suite wiring: prints one pass/fail line per acceptance criterion
at the end of a run that included tests/test_acceptance.py."""

import re

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call":
                continue
            match = _CRITERION_RE.search(report.nodeid)
            if match:
                number, name = match.groups()
                results[int(number)] = (name, outcome.upper() if outcome != "passed" else "PASS")
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, outcome = results[number]
        label = name.replace("_", " ")
        terminalreporter.write_line(f"criterion {number:02d} ({label}): {'PASS' if outcome == 'PASS' else 'FAIL'}")

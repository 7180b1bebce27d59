"""Shared pytest wiring: prints the acceptance gate's verdict lines."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, when the gate ran."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", {}) if module else {}
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])

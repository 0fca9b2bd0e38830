"""Test package configuration.

Present so the tests directory lands on sys.path and the shared fixture
modules (cases, stub_runner) import by name from any test file.  Also
echoes the acceptance checklist lines in the terminal summary, where
they stay visible under output capture.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "CRITERION_LINES", None) if module else None
    if lines:
        terminalreporter.section("behavior checklist")
        for line in lines:
            terminalreporter.write_line(line)

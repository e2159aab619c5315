"""Shared pytest hooks.

The acceptance tests append one verdict line per criterion to
ACCEPTANCE_LINES; the terminal-summary hook prints them after the run so
they survive pytest's per-test output capture.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

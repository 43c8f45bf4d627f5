"""Shared test hooks: echo acceptance criterion lines after the run.

pytest captures stdout, so the per-criterion pass/fail lines printed by
the acceptance tests would be invisible on success. This hook replays
them in the terminal summary where capture does not apply.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)

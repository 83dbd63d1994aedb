import os

# Turn on in-forward invariant checks (mask range, exact complement) for the
# whole test run. Must happen before spngan modules are imported.
os.environ.setdefault("SPNGAN_VALIDATE", "1")

# Pass/fail lines recorded by the acceptance tests; echoed after the run so
# they are visible regardless of output capturing.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria")
        terminalreporter.write_line("-------------------")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

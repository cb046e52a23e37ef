"""Collects the one-line verdicts of the acceptance suite and prints them at the end."""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS, key=lambda l: int(l.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)

import _gate


def pytest_terminal_summary(terminalreporter):
    if _gate.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_gate.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

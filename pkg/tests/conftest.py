def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.LINES:
        terminalreporter.section("acceptance")
        for line in sorted(test_acceptance.LINES, key=lambda s: int(s.split()[1][1:].rstrip(":"))):
            terminalreporter.write_line(line)

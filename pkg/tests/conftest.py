import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criteria pass/fail lines after the test run so
    they are visible without -s, whichever subset of tests executed."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)

import pytest

CRITERIA = []


@pytest.fixture
def report_criterion():
    """Record a one-line verdict for an acceptance criterion and echo it."""

    def record(number, checks):
        failed = [name for name, ok in checks if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {number}: {status} ({len(checks) - len(failed)}/{len(checks)} checks)"
        if failed:
            line += " failing: " + "; ".join(failed)
        CRITERIA.append(line)
        print(line)
        return not failed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)

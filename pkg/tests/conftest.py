import pytest

AC_LINES = {}


@pytest.fixture
def ac_report():
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""

    def report(ac: str, ok: bool, detail: str):
        line = f"{ac} {'PASS' if ok else 'FAIL'}: {detail}"
        AC_LINES[ac] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if not AC_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(AC_LINES, key=lambda a: int(a.split("-")[1])):
        terminalreporter.write_line(AC_LINES[ac])

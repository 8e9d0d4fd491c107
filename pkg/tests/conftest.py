import pytest

_ACCEPTANCE_LINES = []


class AcceptanceReport:
    def __init__(self, number, title):
        self.number = number
        self.title = title

    def record(self, passed, detail, elapsed):
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append((self.number, f"[{status}] criterion {self.number:2d} {self.title}: {detail} "
                                                f"({elapsed:.1f} s)"))


@pytest.fixture
def acceptance():
    return AcceptanceReport


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)

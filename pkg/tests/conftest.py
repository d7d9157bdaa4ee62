import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE[number] = (passed, line)
        print(line)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number][1])

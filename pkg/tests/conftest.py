import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the verdict line for one acceptance criterion.

    Lines are echoed immediately and repeated in the terminal summary, so they
    show up even when pytest captures output.
    """

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])

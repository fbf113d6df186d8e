import pytest

# acceptance verdicts, filled in by test_acceptance.py and echoed at the end of the run
VERDICTS: dict = {}


def record(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    VERDICTS[number] = line
    return line


@pytest.fixture
def verdict(capsys):
    def emit(number, passed, detail):
        line = record(number, passed, detail)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])

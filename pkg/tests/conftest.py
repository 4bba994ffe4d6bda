import pytest

#: (criterion number, passed, detail) lines filled in by test_acceptance
ACCEPTANCE = []


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)

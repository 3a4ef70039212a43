import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_acceptance():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record

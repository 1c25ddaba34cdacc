import pytest

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_COUNT = 10


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records a verdict, prints it and returns ``ok``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return bool(ok)
    request.config._acceptance_ran = True
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not getattr(config, "_acceptance_ran", False):
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in CRITERIA:
            ok, detail = CRITERIA[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} | {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: FAIL | not evaluated (test errored or deselected)")

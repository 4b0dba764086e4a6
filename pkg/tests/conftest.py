import pytest

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    verdicts = request.config.stash.setdefault(CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        verdicts[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(verdicts[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(CRITERIA, {})
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])

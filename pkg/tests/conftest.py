import pytest

_RESULTS: list[tuple[int, str, str]] = []


@pytest.fixture
def criterion():
    """Record ``(number, verdict, detail)`` for the acceptance summary."""

    def report(number: int, ok: bool, detail: str) -> None:
        verdict = "PASS" if ok else "FAIL"
        line = f"criterion {number}: {verdict} - {detail}"
        print(line)
        _RESULTS.append((number, verdict, detail))

    return report


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {verdict} - {detail}")

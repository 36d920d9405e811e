import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``with criterion(3, "gradient suite") as rec: ...; rec.detail = "..."``.
    """

    class _Rec:
        def __init__(self, number, title):
            self.number, self.title, self.detail = number, title, ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"criterion {self.number} {status}: {self.title}"
            if self.detail:
                line += f" ({self.detail})"
            _RESULTS[self.number] = line
            print(line, flush=True)
            return False

    return _Rec


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[n])

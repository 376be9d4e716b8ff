"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

RESULTS: dict[int, tuple[bool, str]] = {}


class Criterion:
    def __init__(self, number: int):
        self.number = number
        self.detail = ""
        self.ok = False

    def check(self, ok: bool, detail: str) -> bool:
        self.ok, self.detail = bool(ok), detail
        return self.ok


@pytest.fixture
def criterion(request):
    number = request.node.get_closest_marker("criterion").args[0]
    crit = Criterion(number)
    yield crit
    RESULTS[number] = (crit.ok, crit.detail or "did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

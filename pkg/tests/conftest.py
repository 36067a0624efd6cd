import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def report(request, capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def _report(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"[acceptance] criterion {number} {title}: {'PASS' if passed else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        request.config.stash.setdefault(_RESULTS, []).append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)

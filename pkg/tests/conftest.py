import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Log one acceptance criterion outcome; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def _record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return _record


@pytest.fixture
def note(request):
    """Informational line printed after the criteria."""
    lines = request.config.stash.setdefault(_LINES, [])

    def _note(text: str) -> None:
        lines.append((100 + len(lines), f"note: {text}"))
        print(text)

    return _note


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """record(number, title, ok, detail): log one PASS/FAIL line and assert ``ok``."""

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {title}" + (f"  ({detail})" if detail else "")
        request.config.stash[_LINES].append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)

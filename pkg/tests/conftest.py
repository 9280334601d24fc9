import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line per acceptance check, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {number:>2}. {name}: {detail}"
        lines.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)

import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture
def acceptance_line(request):
    """Write one result line to the terminal at once and again in the final summary."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(line: str) -> None:
        request.config.stash[ACCEPTANCE].append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

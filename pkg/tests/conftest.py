import pytest

from refinery.harness import register_custom


@pytest.fixture(scope="session", autouse=True)
def _custom_ops():
    register_custom()


@pytest.fixture(scope="session")
def catalog():
    """Built fixtures keyed by catalog name (built once per session)."""
    from refinery.harness import list_fixtures

    return {e.name: e.build() for e in list_fixtures()}


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

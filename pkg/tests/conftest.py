import os

import pytest

from relsn.pivotal import CACHE_ENV


@pytest.fixture(scope="session", autouse=True)
def table_cache(tmp_path_factory):
    """Pivotal tables are simulated once per session into a private directory."""
    path = tmp_path_factory.mktemp("pivotal-cache")
    old = os.environ.get(CACHE_ENV)
    os.environ[CACHE_ENV] = str(path)
    yield path
    if old is None:
        os.environ.pop(CACHE_ENV, None)
    else:
        os.environ[CACHE_ENV] = old


def pytest_terminal_summary(terminalreporter):
    from tests import _verdicts

    if _verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import os
import sys

from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

import pytest

_LINES: list = []


@pytest.fixture
def emit(request):
    """Print a criterion line live and repeat it in the terminal summary."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def write(line: str) -> None:
        _LINES.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
    return write


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)

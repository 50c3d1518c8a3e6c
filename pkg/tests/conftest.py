import pytest

from pgasrt import RuntimeConfig, launch


def spmd(num_units, fn, *args, node_size=None, **cfg):
    """Launch ``fn`` on ``num_units`` units and return the LaunchResult."""
    if node_size is None:
        node_size = num_units
    config = RuntimeConfig(num_units=num_units, node_size=node_size, **cfg)
    return launch(config, fn, *args)


@pytest.fixture
def run_units():
    return spmd


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

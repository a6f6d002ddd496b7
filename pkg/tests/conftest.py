import pytest

_MEASUREMENTS = []


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@pytest.fixture
def measure(request):
    """Record named measurements; they are printed in the terminal summary."""

    def add(**values):
        _MEASUREMENTS.append((request.node.name, values))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _MEASUREMENTS:
        return
    terminalreporter.section("acceptance measurements")
    for name, values in _MEASUREMENTS:
        terminalreporter.write_line(f"{name}: " + ", ".join(f"{k}={_fmt(v)}" for k, v in values.items()))

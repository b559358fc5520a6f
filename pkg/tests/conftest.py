import pytest

from velos.fabric import LatencyModel, SimFabric


class Recorder:
    """Process stub that records completions and messages."""

    def __init__(self, pid):
        self.pid = pid
        self.completions = []
        self.messages = []
        self.updates = []

    def on_complete(self, ticket, result):
        self.completions.append((ticket, result))

    def on_message(self, src, msg):
        self.messages.append((src, msg))

    def on_local_update(self, slot):
        self.updates.append(slot)


@pytest.fixture
def sim3():
    fabric = SimFabric(3, LatencyModel(), seed=0)
    procs = [Recorder(i) for i in range(3)]
    for p in procs:
        fabric.attach(p)
    return fabric, procs


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

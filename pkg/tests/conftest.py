import json
from pathlib import Path

import numpy as np
import pytest

from expertplace import topology
from expertplace.trace import HotOverride, TraceGenSpec, generate

FIXTURES = Path(__file__).parent / "fixtures"


def load_regression() -> dict:
    return json.loads((FIXTURES / "regression.json").read_text())


def skewed_spec() -> TraceGenSpec:
    doc = load_regression()["trace_spec"]
    hot = tuple(HotOverride(h["layer"], tuple(h["experts"]), h["mass_fraction"])
                for h in doc.pop("hot_overrides"))
    return TraceGenSpec(hot_overrides=hot, **doc)


@pytest.fixture(scope="session")
def regression() -> dict:
    return load_regression()


@pytest.fixture(scope="session")
def skewed_trace():
    """E=8, L=32, k=2 trace with skew, successor dependency and a 64% hot layer."""
    return generate(skewed_spec())


@pytest.fixture(scope="session")
def two_node_topology():
    return topology.hierarchical(2, 2, topology.NVLINK4_BW, topology.IB_400G_BW)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion lines recorded by the acceptance module, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_order):
            terminalreporter.write_line(line)


def _criterion_order(line: str):
    head = line.split(":", 1)[0].split()[-1]
    return (0, int(head)) if head.isdigit() else (1, head)

import numpy as np
import pytest

from kirchhoffnet.devices import DeviceKind
from kirchhoffnet.dynamics import LayerDynamics
from kirchhoffnet.topology import Topology


def random_topology(rng, max_nodes=6, max_edges=12, ground=True):
    n = int(rng.integers(2, max_nodes + 1))
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    m = int(rng.integers(1, max_edges + 1))
    edges = tuple(pairs[p] for p in rng.integers(0, len(pairs), m))
    gedges = tuple(int(j) for j in rng.integers(0, n, int(rng.integers(0, n + 1)))) if ground else ()
    return Topology(n, edges, gedges)


def random_dynamics(rng, kind, max_nodes=6, max_edges=12, ground=True, theta_cap=None, scale=1.0):
    kind = DeviceKind.parse(kind)
    topo = random_topology(rng, max_nodes, max_edges, ground)
    params = scale * rng.uniform(-1, 1, topo.num_devices * kind.param_count)
    cap = float(rng.uniform(0.5, 2.0)) if theta_cap is None else theta_cap
    return LayerDynamics(topo, kind, params, cap)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

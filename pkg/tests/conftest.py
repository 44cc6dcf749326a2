import numpy as np
import pytest

from edge_influence.graph import Graph
from edge_influence.model import GcnConfig, init_params


def random_graph(seed, n=8, p=0.4, d=3, num_classes=3, masks=None):
    """Small connected-ish random graph with every node in some mask."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    # spanning path so that hop structure is non-trivial
    path = {(i, i + 1) for i in range(n - 1)}
    edges = sorted(path | {(int(a), int(b)) for a, b in zip(iu[keep], ju[keep])})
    labels = rng.integers(0, num_classes, size=n)
    features = rng.standard_normal((n, d))
    if masks is None:
        order = rng.permutation(n)
        third = max(1, n // 3)
        masks = [order[:third], order[third:2 * third], order[2 * third:]]
    m = np.zeros((3, n), dtype=bool)
    for i, idx in enumerate(masks):
        m[i, idx] = True
    return Graph(n, num_classes, features, labels, edges, m[0], m[1], m[2])


def path_graph(n, d=2, num_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    edges = [(i, i + 1) for i in range(n - 1)]
    labels = np.arange(n) % num_classes
    train = np.zeros(n, bool)
    train[0] = True
    val = np.zeros(n, bool)
    val[n - 1] = True
    return Graph(n, num_classes, rng.standard_normal((n, d)), labels, edges,
                 train, val, ~(train | val))


def small_params(graph, hidden=4, layers=2, seed=0, scale=1.0):
    cfg = GcnConfig.for_graph(graph, hidden=hidden, layers=layers, seed=seed)
    p = init_params(cfg)
    rng = np.random.default_rng(seed + 100)
    # non-zero biases so every block is exercised
    return p.with_vector(scale * p.vector + 0.1 * rng.standard_normal(p.vector.size))


@pytest.fixture
def graph8():
    return random_graph(0)


@pytest.fixture
def params8(graph8):
    return small_params(graph8)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import sys
import numpy as np
import pytest

from csaddle.graph import GraphSpec, build_graph


@pytest.fixture
def ring4():
    return build_graph(GraphSpec("ring", 4))


@pytest.fixture
def path2():
    return build_graph(GraphSpec("path", 2))


def random_graph(seed, n):
    """Connected graph drawn from a mix of kinds; used by many property tests."""
    rng = np.random.default_rng(seed)
    kind = ("ring", "complete", "star", "erdos_renyi", "path")[seed % 5]
    rule = "uniform" if rng.random() < 0.5 else "unit"
    return build_graph(GraphSpec(kind, n, p=0.6, weight_rule=rule, seed=seed))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])

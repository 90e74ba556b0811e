import numpy as np
import pytest

from godeflow.graphs import build_graph


@pytest.fixture
def chain_graph():
    """Three nodes in a line: 0 - 1 - 2."""
    return build_graph(3, [(0, 1), (1, 2)])


@pytest.fixture
def small_graph():
    """Six nodes, mixed degrees, one isolated node (5)."""
    return build_graph(6, [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

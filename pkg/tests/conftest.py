import numpy as np
import pytest

from diskgnn.datasets import synthetic_kg, synthetic_nc
from diskgnn.graph_store import (
    InMemorySubgraph, RawGraph, assign_partitions, build_buckets, subgraph_from_graph,
)

# five-node example graph, A..E = 0..4
A, B, C, D, E = range(5)
FIVE_NODE_EDGES = np.array([[C, 0, A], [D, 0, A], [D, 0, B], [A, 0, B], [E, 0, C], [A, 0, D]])


@pytest.fixture
def five_graph():
    return RawGraph(5, 1, FIVE_NODE_EDGES.copy())


@pytest.fixture
def five_sub(five_graph):
    return subgraph_from_graph(five_graph)


def random_graph(n, m, rng, num_relations=1):
    edges = np.stack([
        rng.integers(0, n, m),
        rng.integers(0, num_relations, m),
        rng.integers(0, n, m),
    ], axis=1).astype(np.int64)
    return RawGraph(n, num_relations, edges)


def full_subgraph(g):
    return InMemorySubgraph(g.num_nodes, [0], np.arange(g.num_nodes), g.edges, g.num_relations)


@pytest.fixture
def kg_store(tmp_path):
    g = synthetic_kg(num_nodes=300, num_relations=4, num_edges=3000, num_clusters=6, seed=1)
    pm = assign_partitions(g, 8, seed=0)
    return build_buckets(g, pm, tmp_path / "kg", dim=8, seed=0)


@pytest.fixture
def nc_store(tmp_path):
    g = synthetic_nc(num_nodes=400, num_classes=3, avg_degree=6, feat_dim=6, seed=2)
    pm = assign_partitions(g, 8, mode="train-first", seed=0)
    return build_buckets(g, pm, tmp_path / "nc", seed=0)

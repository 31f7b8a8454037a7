"""Synthetic graphs for tests and demos, and the FB15k-237 directory loader."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from .graph_store import RawGraph, ingest_split_dir

FB15K237_ENV = "FB15K237_DIR"
FB15K237_STATS = {"num_nodes": 14541, "num_relations": 237, "num_edges": 272115}


def _split_edges(edges: np.ndarray, rng, valid_frac: float, test_frac: float):
    perm = rng.permutation(len(edges))
    n_valid = int(round(valid_frac * len(edges)))
    n_test = int(round(test_frac * len(edges)))
    valid = edges[perm[:n_valid]]
    test = edges[perm[n_valid:n_valid + n_test]]
    train = edges[np.sort(perm[n_valid + n_test:])]
    return train, valid, test


def synthetic_kg(num_nodes: int = 2000, num_relations: int = 8, num_edges: int = 40000,
                 num_clusters: int = 20, seed: int = 0, valid_frac: float = 0.05,
                 test_frac: float = 0.05) -> RawGraph:
    """Knowledge graph with a planted block structure DistMult can learn.

    Nodes fall into clusters.  Each relation pairs clusters up (a symmetric
    map, since DistMult scores are symmetric in head and tail) and every edge
    joins a random head to a random member of the paired cluster.
    """
    rng = np.random.default_rng(seed)
    cluster = rng.integers(0, num_clusters, size=num_nodes)
    members = [np.flatnonzero(cluster == k) for k in range(num_clusters)]
    pairing = np.empty((num_relations, num_clusters), np.int64)
    for r in range(num_relations):
        perm = rng.permutation(num_clusters)
        half = num_clusters // 2
        a, b = perm[:half], perm[half:2 * half]
        pairing[r, a], pairing[r, b] = b, a
        if num_clusters % 2:
            pairing[r, perm[-1]] = perm[-1]
    src = rng.integers(0, num_nodes, size=num_edges)
    rel = rng.integers(0, num_relations, size=num_edges)
    target_cluster = pairing[rel, cluster[src]]
    dst = np.empty(num_edges, np.int64)
    for k in range(num_clusters):
        at = np.flatnonzero(target_cluster == k)
        if len(members[k]):
            dst[at] = rng.choice(members[k], size=len(at))
        else:
            dst[at] = rng.integers(0, num_nodes, size=len(at))
    edges = np.unique(np.stack([src, rel, dst], axis=1), axis=0)
    train, valid, test = _split_edges(edges, rng, valid_frac, test_frac)
    g = RawGraph(num_nodes, num_relations, train, valid, test)
    g.validate()
    return g


def synthetic_nc(num_nodes: int = 3000, num_classes: int = 5, avg_degree: int = 10,
                 feat_dim: int = 16, homophily: float = 0.8, noise: float = 2.0,
                 train_frac: float = 0.3, valid_frac: float = 0.1, seed: int = 0) -> RawGraph:
    """Homophilous graph with noisy class-centroid features.

    Features alone classify poorly at the default noise level; averaging
    over same-class neighbors helps, which is what a GNN layer exploits.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=num_nodes)
    centroids = rng.normal(size=(num_classes, feat_dim))
    feats = centroids[labels] + noise * rng.normal(size=(num_nodes, feat_dim))
    m = num_nodes * avg_degree
    src = rng.integers(0, num_nodes, size=m)
    same = rng.random(m) < homophily
    by_class = [np.flatnonzero(labels == k) for k in range(num_classes)]
    dst = rng.integers(0, num_nodes, size=m)
    for k in range(num_classes):
        at = np.flatnonzero(same & (labels[src] == k))
        dst[at] = rng.choice(by_class[k], size=len(at))
    keep = src != dst
    edges = np.unique(np.stack([src[keep], np.zeros(keep.sum(), np.int64), dst[keep]], axis=1), axis=0)
    perm = rng.permutation(num_nodes)
    n_train = int(train_frac * num_nodes)
    n_valid = int(valid_frac * num_nodes)
    g = RawGraph(
        num_nodes, 1, edges,
        labels=labels.astype(np.int64),
        train_nodes=np.sort(perm[:n_train]),
        valid_nodes=np.sort(perm[n_train:n_train + n_valid]),
        test_nodes=np.sort(perm[n_train + n_valid:]),
        features=feats.astype(np.float32),
    )
    g.validate()
    return g


def bias_graph(num_nodes: int = 2000, out_degree: int = 100, seed: int = 0) -> RawGraph:
    """Near-regular random graph: every node has exactly ``out_degree`` distinct out-neighbors.

    With a flat degree profile the bias measure reflects the schedule rather
    than a handful of low-degree nodes.
    """
    rng = np.random.default_rng(seed)
    keys = rng.random((num_nodes, num_nodes))
    np.fill_diagonal(keys, 2.0)
    dst = np.argpartition(keys, out_degree, axis=1)[:, :out_degree]
    src = np.repeat(np.arange(num_nodes), out_degree)
    edges = np.stack([src, np.zeros_like(src), dst.ravel()], axis=1).astype(np.int64)
    return RawGraph(num_nodes, 1, edges)


def toy_kg(seed: int = 0) -> RawGraph:
    """Small graph for quick end-to-end checks (40 nodes, 3 relations)."""
    return synthetic_kg(num_nodes=40, num_relations=3, num_edges=240, num_clusters=4, seed=seed,
                        valid_frac=0.1, test_frac=0.1)


def find_fb15k237(root=None) -> Optional[Path]:
    """Directory holding FB15k-237 ``train.txt``/``valid.txt``/``test.txt``, or None."""
    candidates = [root, os.environ.get(FB15K237_ENV)]
    for c in candidates:
        if c and (Path(c) / "train.txt").exists():
            return Path(c)
    return None


def load_fb15k237(root=None) -> RawGraph:
    d = find_fb15k237(root)
    if d is None:
        raise FileNotFoundError(
            f"FB15k-237 not found; point {FB15K237_ENV} at a directory with train.txt, valid.txt, test.txt"
        )
    return ingest_split_dir(d)

"""Delta-encoded multi-hop neighborhood samples.

A :class:`DenseSample` stacks the node groups Δ_0 .. Δ_k (targets last) and
the one-hop neighbor lists of every node outside Δ_0.  Each node's
neighborhood is sampled once and reused by every layer that needs it.

Layout for targets {A, B} with two hops::

    node_ids        = [E | C D | A B]      node_id_offsets = [0, 1, 3]
    nbrs            = [C's, D's, A's, B's] nbr_offsets     = start of each list
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .graph_store import InMemorySubgraph, ResidencyError

ALL = -1  # unlimited fanout


class ClosureError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    fanouts: tuple = ()
    direction: str = "incoming"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fanouts", tuple(int(f) for f in self.fanouts))
        if self.direction not in ("incoming", "outgoing", "both"):
            raise ValueError(f"direction must be incoming/outgoing/both, got {self.direction!r}")
        for f in self.fanouts:
            if f != ALL and f < 1:
                raise ValueError(f"fanout must be >= 1 or ALL, got {f}")

    @property
    def k(self) -> int:
        return len(self.fanouts)


@dataclass
class DenseSample:
    node_id_offsets: np.ndarray
    node_ids: np.ndarray
    nbr_offsets: np.ndarray
    nbrs: np.ndarray  # (m, 2): neighbor node id, relation id
    repr_map: Optional[np.ndarray] = None
    fanouts: tuple = field(default=())

    @property
    def k(self) -> int:
        return len(self.node_id_offsets) - 1

    @property
    def num_groups(self) -> int:
        return len(self.node_id_offsets)

    def group(self, g: int) -> np.ndarray:
        """Node group in storage order: 0 is Δ_0 (outermost), ``k`` the targets."""
        ends = np.append(self.node_id_offsets, len(self.node_ids))
        return self.node_ids[ends[g]:ends[g + 1]]

    @property
    def targets(self) -> np.ndarray:
        return self.group(self.k)

    @property
    def owners(self) -> np.ndarray:
        """Nodes owning a neighbor list, i.e. ``node_ids[node_id_offsets[1]:]``."""
        if self.k == 0:
            return self.node_ids[:0]
        return self.node_ids[self.node_id_offsets[1]:]

    def segment_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        starts = self.nbr_offsets
        ends = np.append(starts[1:], len(self.nbrs)).astype(np.int64)
        return starts, ends

    def neighbors_of(self, node: int) -> np.ndarray:
        owners = self.owners
        hit = np.flatnonzero(owners == node)
        if not len(hit):
            raise KeyError(f"node {node} has no neighbor list in this sample")
        starts, ends = self.segment_bounds()
        j = hit[0]
        return self.nbrs[starts[j]:ends[j], 0]

    def to_json(self) -> str:
        return json.dumps({
            "node_id_offsets": self.node_id_offsets.tolist(),
            "node_ids": self.node_ids.tolist(),
            "nbr_offsets": self.nbr_offsets.tolist(),
            "nbrs": self.nbrs.tolist(),
            "repr_map": None if self.repr_map is None else self.repr_map.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DenseSample":
        d = json.loads(text)
        return cls(
            node_id_offsets=np.asarray(d["node_id_offsets"], np.int64),
            node_ids=np.asarray(d["node_ids"], np.int64),
            nbr_offsets=np.asarray(d["nbr_offsets"], np.int64),
            nbrs=np.asarray(d["nbrs"], np.int64).reshape(-1, 2),
            repr_map=None if d["repr_map"] is None else np.asarray(d["repr_map"], np.int64),
        )


def _expand_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + c)`` for each pair."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64)
    seg = np.repeat(np.arange(len(counts)), counts)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return starts[seg] + (np.arange(total) - first[seg])


def _candidate_lists(sub: InMemorySubgraph, local: np.ndarray, direction: str):
    """Per-node candidate neighbors as flat (node, rel) arrays grouped by owner.

    With ``direction='both'`` a node's incoming list comes first, then its
    outgoing list with relation ids shifted by ``num_relations`` of the
    opposite direction flag (``rel + R`` marks an inverse edge).
    """
    parts_nodes, parts_rels, parts_counts = [], [], []
    if direction in ("incoming", "both"):
        s, e = sub.in_offsets[local], sub.in_offsets[local + 1]
        idx = _expand_ranges(s, e - s)
        parts_nodes.append(sub.in_edges[idx, 0])
        parts_rels.append(sub.in_edges[idx, 1])
        parts_counts.append(e - s)
    if direction in ("outgoing", "both"):
        s, e = sub.out_offsets[local], sub.out_offsets[local + 1]
        idx = _expand_ranges(s, e - s)
        rel = sub.out_edges[idx, 1]
        if direction == "both":
            rel = rel + _num_relations(sub)
        parts_nodes.append(sub.out_edges[idx, 2])
        parts_rels.append(rel)
        parts_counts.append(e - s)
    if len(parts_counts) == 1:
        return parts_nodes[0], parts_rels[0], parts_counts[0]
    # interleave per owner: incoming block then outgoing block
    c_in, c_out = parts_counts
    counts = c_in + c_out
    n = len(counts)
    owner_in = np.repeat(np.arange(n), c_in)
    owner_out = np.repeat(np.arange(n), c_out)
    owner = np.concatenate([owner_in, owner_out])
    side = np.concatenate([np.zeros(len(owner_in), np.int8), np.ones(len(owner_out), np.int8)])
    order = np.lexsort((side, owner))  # stable within each side
    nodes = np.concatenate(parts_nodes)[order]
    rels = np.concatenate(parts_rels)[order]
    return nodes, rels, counts


def _num_relations(sub: InMemorySubgraph) -> int:
    r = getattr(sub, "num_relations", None)
    if r is None:
        r = int(max(sub.out_edges[:, 1].max(initial=-1), 0)) + 1
    return r


def one_hop_sample(sub: InMemorySubgraph, delta, fanout: int, direction: str, rng: np.random.Generator):
    """Sample up to ``fanout`` neighbors per node without replacement.

    Returns ``(nbrs, offsets)`` where ``nbrs`` is ``(m, 2)`` (node, rel) and
    ``offsets[j]`` is where node ``delta[j]``'s neighbors start.  Nodes with at
    most ``fanout`` neighbors keep their full list in stored order.  For larger
    lists every candidate gets a uniform random key and the ``fanout`` smallest
    keys win, which is a uniform subset; keys are drawn in delta order.
    """
    delta = np.asarray(delta, dtype=np.int64)
    local = sub.to_local(delta)
    nodes, rels, counts = _candidate_lists(sub, local, direction)
    if fanout == ALL or not len(nodes):
        take = counts
        sel_nodes, sel_rels = nodes, rels
    else:
        take = np.minimum(counts, fanout)
        big = counts > fanout
        if not big.any():
            sel_nodes, sel_rels = nodes, rels
        else:
            owner = np.repeat(np.arange(len(counts)), counts)
            first = np.concatenate([[0], np.cumsum(counts)[:-1]])
            pos = np.arange(len(nodes)) - first[owner]
            in_big = big[owner]
            keys = np.zeros(len(nodes))
            keys[in_big] = rng.random(int(in_big.sum()))
            # small lists keep their order (keys = position), big lists are ranked by random key
            keys[~in_big] = pos[~in_big]
            order = np.lexsort((keys, owner))
            rank = np.empty(len(nodes), np.int64)
            rank[order] = np.arange(len(nodes)) - first[owner[order]]
            keep = rank < take[owner]
            # keep selected entries in rank order within each owner
            sel = order[keep[order]]
            sel_nodes, sel_rels = nodes[sel], rels[sel]
    offsets = np.concatenate([[0], np.cumsum(take)])[:-1].astype(np.int64)
    nbrs = np.stack([sel_nodes, sel_rels], axis=1).astype(np.int64).reshape(-1, 2)
    return nbrs, offsets


def compute_next_delta(new_nbrs, node_ids) -> np.ndarray:
    """Unique neighbor ids not yet in ``node_ids``, in first-occurrence order."""
    new_nbrs = np.asarray(new_nbrs, dtype=np.int64)
    ids = new_nbrs[:, 0] if new_nbrs.ndim == 2 else new_nbrs
    if not len(ids):
        return np.empty(0, np.int64)
    uniq, first = np.unique(ids, return_index=True)
    uniq = uniq[np.argsort(first, kind="stable")]
    return uniq[~np.isin(uniq, node_ids)]


def multi_hop_sample(sub: InMemorySubgraph, targets, cfg: SamplerConfig,
                     rng: Optional[np.random.Generator] = None) -> DenseSample:
    """Build a DenseSample for ``targets`` with ``cfg.k`` hops.

    ``cfg.fanouts[0]`` applies to the targets, ``cfg.fanouts[1]`` to the nodes
    first reached at hop one, and so on.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if len(np.unique(targets)) != len(targets):
        raise ValueError("targets must be unique")
    if not sub.is_resident(targets).all():
        bad = targets[~sub.is_resident(targets)]
        raise ResidencyError(f"targets not resident: {bad[:10].tolist()}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    node_id_offsets = np.array([0], np.int64)
    node_ids = targets.copy()
    nbr_offsets = np.empty(0, np.int64)
    nbrs = np.empty((0, 2), np.int64)
    delta = targets
    for hop in range(cfg.k):
        d_nbrs, d_offsets = one_hop_sample(sub, delta, cfg.fanouts[hop], cfg.direction, rng)
        nbr_offsets = np.concatenate([d_offsets, nbr_offsets + len(d_nbrs)])
        nbrs = np.concatenate([d_nbrs, nbrs])
        delta = compute_next_delta(d_nbrs, node_ids)
        node_id_offsets = np.concatenate([[0], node_id_offsets + len(delta)])
        node_ids = np.concatenate([delta, node_ids])
    return DenseSample(node_id_offsets, node_ids, nbr_offsets, nbrs, None, cfg.fanouts)


def build_repr_map(d: DenseSample) -> DenseSample:
    """Attach ``repr_map``: row of each neighbor's representation (its position in node_ids)."""
    ids = d.nbrs[:, 0]
    order = np.argsort(d.node_ids, kind="stable")
    sorted_ids = d.node_ids[order]
    pos = np.searchsorted(sorted_ids, ids)
    pos = np.minimum(pos, max(len(sorted_ids) - 1, 0))
    if len(ids) and (len(sorted_ids) == 0 or not np.array_equal(sorted_ids[pos], ids)):
        missing = ids[sorted_ids[pos] != ids] if len(sorted_ids) else ids
        raise ClosureError(f"neighbor ids missing from node_ids: {np.unique(missing)[:10].tolist()}")
    repr_map = order[pos].astype(np.int64) if len(ids) else np.empty(0, np.int64)
    return replace(d, repr_map=repr_map)


def advance_layer(d: DenseSample) -> DenseSample:
    """Drop the outermost group and the neighbor lists of the next group."""
    if d.num_groups < 2:
        raise ValueError("cannot advance a sample with a single node group")
    n_prev = int(d.node_id_offsets[1])  # |Δ_{i-1}|
    ends = np.append(d.node_id_offsets, len(d.node_ids))
    n_cur = int(ends[2] - ends[1])  # |Δ_i|
    n_cur_nbrs = int(d.nbr_offsets[n_cur]) if n_cur < len(d.nbr_offsets) else len(d.nbrs)
    nbrs = d.nbrs[n_cur_nbrs:]
    repr_map = None if d.repr_map is None else d.repr_map[n_cur_nbrs:] - n_prev
    nbr_offsets = d.nbr_offsets[n_cur:] - n_cur_nbrs
    node_ids = d.node_ids[n_prev:]
    node_id_offsets = d.node_id_offsets[1:] - n_prev
    return DenseSample(node_id_offsets, node_ids, nbr_offsets, nbrs, repr_map, d.fanouts[:-1] if d.fanouts else ())


def check_invariants(d: DenseSample) -> None:
    """Raise AssertionError if ``d`` violates a structural invariant."""
    assert len(np.unique(d.node_ids)) == len(d.node_ids), "duplicate node ids"
    assert d.node_id_offsets[0] == 0 and np.all(np.diff(d.node_id_offsets) >= 0)
    owners = d.owners
    assert len(d.nbr_offsets) == len(owners), "one neighbor range per owner"
    if len(d.nbr_offsets):
        assert d.nbr_offsets[0] == 0 and np.all(np.diff(d.nbr_offsets) >= 0)
        assert d.nbr_offsets[-1] <= len(d.nbrs)
    assert np.isin(d.nbrs[:, 0], d.node_ids).all(), "closure violated"
    if d.repr_map is not None:
        assert len(d.repr_map) == len(d.nbrs)
        assert np.array_equal(d.node_ids[d.repr_map], d.nbrs[:, 0])


def naive_multi_hop_sample(sub: InMemorySubgraph, targets, cfg: SamplerConfig,
                           rng: Optional[np.random.Generator] = None) -> dict:
    """Layer-wise resampling baseline (no one-hop reuse across layers).

    Each layer's frontier is deduplicated within the layer, and every frontier
    node is sampled again even if an earlier layer already sampled it.
    Returns per-layer node counts and totals.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    frontier = np.unique(np.asarray(targets, dtype=np.int64))
    layer_nodes = [len(frontier)]
    edges = 0
    for hop in range(cfg.k):
        nb, _ = one_hop_sample(sub, frontier, cfg.fanouts[hop], cfg.direction, rng)
        edges += len(nb)
        frontier = np.unique(np.concatenate([frontier, nb[:, 0]]))
        layer_nodes.append(len(frontier))
    return {"layer_nodes": layer_nodes, "nodes": int(sum(layer_nodes)), "edges": int(edges)}

"""Partition replacement policies, Edge Permutation Bias and auto-tuning.

A policy produces a :class:`Schedule`: the sequence ``S`` of partition sets
loaded during one epoch and the sequence ``X`` of training examples (edge
buckets or node ids) processed while each set is resident.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ScheduleError(RuntimeError):
    pass


@dataclass
class LogicalGrouping:
    p: int
    l: int
    groups: list  # logical id -> sorted array of physical ids
    seed: Optional[int] = None

    @property
    def physical_to_logical(self) -> np.ndarray:
        out = np.empty(self.p, np.int64)
        for g, members in enumerate(self.groups):
            out[members] = g
        return out

    def expand(self, logical_ids) -> frozenset:
        return frozenset(int(x) for g in logical_ids for x in self.groups[g])


def identity_grouping(p: int) -> LogicalGrouping:
    return LogicalGrouping(p, p, [np.array([i]) for i in range(p)])


def group_logical(p: int, l: int, seed: int = 0) -> LogicalGrouping:
    """Random balanced grouping of ``p`` physical partitions into ``l`` logical ones."""
    if l < 2:
        raise ValueError("need at least 2 logical partitions")
    if p % l:
        divisors = [x for x in range(2, p + 1) if p % x == 0]
        raise ValueError(f"l={l} does not divide p={p}; valid choices: {divisors}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(p)
    groups = [np.sort(row) for row in perm.reshape(l, p // l)]
    return LogicalGrouping(p, l, groups, seed)


@dataclass
class Schedule:
    """``S[i]`` holds logical ids; ``X[i]`` flat bucket ids ``i * p + j`` (or node ids)."""

    grouping: LogicalGrouping
    S: list
    X: list = field(default_factory=list)
    swaps: list = field(default_factory=list)
    kind: str = "buckets"  # "buckets" or "nodes"

    def physical(self, i: int) -> frozenset:
        return self.grouping.expand(self.S[i])

    def __len__(self) -> int:
        return len(self.S)


def _swaps(S) -> list:
    out = []
    for a, b in zip(S, S[1:]):
        ev, ld = set(a) - set(b), set(b) - set(a)
        out.append((tuple(sorted(ev)), tuple(sorted(ld))))
    return out


# ---------------------------------------------------------------------------
# COMET


def comet_schedule(g: LogicalGrouping, c_l: int, seed: int = 0, tiebreak: str = "lookahead") -> list:
    """One-swap greedy cover of all logical partition pairs.

    Each step evicts one resident logical partition and loads one from disk,
    choosing the swap that covers the most not-yet-co-resident pairs.  With
    ``tiebreak="random"`` ties are broken uniformly at random.  The default
    ``"lookahead"`` first keeps the tied swaps that evict the most exhausted
    resident and load the most needed outsider, then picks uniformly.  If no
    swap adds a pair, it loads the partition with the most uncovered pairs
    left and evicts the resident one with the fewest.
    """
    l = g.l
    if c_l >= l:
        return [frozenset(range(l))]
    if c_l < 2:
        raise ValueError("c_l must be at least 2")
    rng = np.random.default_rng(seed)
    covered = np.zeros((l, l), bool)
    np.fill_diagonal(covered, True)

    def cover(members):
        idx = np.array(sorted(members))
        covered[np.ix_(idx, idx)] = True

    cur = set(int(x) for x in rng.choice(l, size=c_l, replace=False))
    S = [frozenset(cur)]
    cover(cur)
    while not covered.all():
        resident = np.array(sorted(cur))
        outside = np.array(sorted(set(range(l)) - cur))
        # gain[a, b]: new pairs from loading outside[b] in place of resident[a]
        unc = ~covered[np.ix_(outside, resident)]  # (n_out, n_res)
        total = unc.sum(axis=1)  # pairs with all residents
        gain = total[None, :] - unc.T.astype(np.int64)  # (n_res, n_out)
        best = gain.max()
        if best > 0:
            cand = np.argwhere(gain == best)
            if tiebreak == "lookahead" and len(cand) > 1:
                left = (~covered).sum(axis=1)
                # prefer evicting exhausted partitions and loading the most needed ones
                score = -left[resident[cand[:, 0]]] * l + left[outside[cand[:, 1]]]
                cand = cand[score == score.max()]
            a, b = cand[rng.integers(len(cand))]
            ev, ld = int(resident[a]), int(outside[b])
        else:
            left = (~covered).sum(axis=1)
            ld_opts = outside[left[outside] == left[outside].max()]
            ld = int(rng.choice(ld_opts))
            ev_opts = resident[left[resident] == left[resident].min()]
            ev = int(rng.choice(ev_opts))
        cur.remove(ev)
        cur.add(ld)
        S.append(frozenset(cur))
        cover(cur)
    return S


def comet_assign(S, g: LogicalGrouping, seed: int = 0, bucket_counts: Optional[np.ndarray] = None) -> list:
    """Assign every physical bucket to one uniformly chosen set holding both endpoints.

    Buckets with zero edges are skipped when ``bucket_counts`` is given.
    """
    rng = np.random.default_rng(seed)
    p = g.p
    p2l = g.physical_to_logical
    member = np.zeros((len(S), g.l), bool)
    for t, s in enumerate(S):
        member[t, sorted(s)] = True
    X = [[] for _ in S]
    for b in range(p * p):
        if bucket_counts is not None and bucket_counts[b] == 0:
            continue
        i, j = divmod(b, p)
        li, lj = p2l[i], p2l[j]
        opts = np.flatnonzero(member[:, li] & member[:, lj])
        if not len(opts):
            raise ScheduleError(f"bucket ({i}, {j}) is never resident; the schedule does not cover it")
        X[int(opts[rng.integers(len(opts))])].append(b)
    return [np.array(x, np.int64) for x in X]


def comet(p: int, l: int, c: int, seed: int = 0, bucket_counts=None, tiebreak: str = "lookahead") -> Schedule:
    """Fresh grouping, partition sequence and deferred bucket assignment for one epoch."""
    if c >= p:
        g = group_logical(p, l, seed) if l >= 2 else identity_grouping(p)
        S = [frozenset(range(g.l))]
        return Schedule(g, S, comet_assign(S, g, seed, bucket_counts), [])
    if (c * l) % p:
        raise ValueError(f"c*l/p must be an integer (p={p}, l={l}, c={c})")
    c_l = c * l // p
    ss = np.random.SeedSequence(seed).spawn(3)
    g = group_logical(p, l, int(ss[0].generate_state(1)[0]))
    S = comet_schedule(g, c_l, int(ss[1].generate_state(1)[0]), tiebreak)
    X = comet_assign(S, g, int(ss[2].generate_state(1)[0]), bucket_counts)
    return Schedule(g, S, X, _swaps(S))


# ---------------------------------------------------------------------------
# BETA


def beta_assign(S, p: int, bucket_counts: Optional[np.ndarray] = None) -> list:
    """Greedy assignment: each bucket goes to the first set where it becomes available."""
    done = np.zeros((p, p), bool)
    if bucket_counts is not None:
        done |= np.asarray(bucket_counts).reshape(p, p) == 0
    X = []
    for s in S:
        idx = np.array(sorted(s))
        avail = np.zeros((p, p), bool)
        avail[np.ix_(idx, idx)] = True
        new = avail & ~done
        done |= new
        X.append(np.flatnonzero(new.ravel()))
    if not done.all():
        raise ScheduleError("some buckets were never resident")
    return X


def beta_schedule(p: int, c: int, bucket_counts: Optional[np.ndarray] = None, seed: int = 0) -> Schedule:
    """Greedy IO-minimizing baseline over physical partitions.

    Starts from a random set of ``c`` partitions; every step evicts the
    resident partition with the fewest unassigned buckets left (ties random)
    and loads the partition that makes the most unassigned buckets available.
    """
    g = identity_grouping(p)
    if c >= p:
        S = [frozenset(range(p))]
        return Schedule(g, S, beta_assign(S, p, bucket_counts), [])
    if c < 2:
        raise ValueError("buffer capacity must be at least 2")
    rng = np.random.default_rng(seed)
    todo = np.ones((p, p), bool)
    if bucket_counts is not None:
        todo &= np.asarray(bucket_counts).reshape(p, p) > 0
    cur = set(int(x) for x in rng.choice(p, size=c, replace=False))
    S = [frozenset(cur)]

    def mark(members):
        idx = np.array(sorted(members))
        todo[np.ix_(idx, idx)] = False

    mark(cur)
    while todo.any():
        per_node = todo.sum(axis=0) + todo.sum(axis=1) - np.diag(todo)
        resident = np.array(sorted(cur))
        outside = np.array(sorted(set(range(p)) - cur))
        ev_opts = resident[per_node[resident] == per_node[resident].min()]
        ev = int(rng.choice(ev_opts))
        keep = np.array(sorted(cur - {ev}))
        gain = np.array([todo[q, keep].sum() + todo[keep, q].sum() + todo[q, q] for q in outside])
        if gain.max() > 0:
            ld_opts = outside[gain == gain.max()]
        else:
            ld_opts = outside[per_node[outside] == per_node[outside].max()]
        ld = int(rng.choice(ld_opts))
        cur.remove(ev)
        cur.add(ld)
        S.append(frozenset(cur))
        mark(cur)
    return Schedule(g, S, beta_assign(S, p, bucket_counts), _swaps(S))


# ---------------------------------------------------------------------------
# node classification


def nc_schedule(node_to_partition: np.ndarray, train_nodes, c: int, p: int, seed: int = 0,
                k_train: Optional[int] = None) -> Schedule:
    """Training-node caching.

    With the train-first layout and ``k_train < c``: a single set made of the
    training partitions plus random others, zero swaps.  Otherwise: start with
    ``c`` random partitions and repeatedly replace a random resident partition
    by a random never-seen one until every partition has been resident; each
    training node goes to the first set that holds it.
    """
    rng = np.random.default_rng(seed)
    g = identity_grouping(p)
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if k_train is None:
        k_train = int(node_to_partition[train_nodes].max()) + 1 if len(train_nodes) else 0
    if k_train < c or c >= p:
        others = np.setdiff1d(np.arange(p), np.arange(k_train))
        extra = rng.choice(others, size=min(c, p) - k_train, replace=False) if c > k_train else []
        S = [frozenset(list(range(k_train)) + [int(x) for x in extra])]
        return Schedule(g, S, [train_nodes.copy()], [], kind="nodes")
    cur = [int(x) for x in rng.choice(p, size=c, replace=False)]
    seen = set(cur)
    S = [frozenset(cur)]
    while len(seen) < p:
        unseen = sorted(set(range(p)) - seen)
        ld = int(rng.choice(unseen))
        slot = int(rng.integers(len(cur)))
        cur[slot] = ld
        seen.add(ld)
        S.append(frozenset(cur))
    part = node_to_partition[train_nodes]
    assigned = np.zeros(len(train_nodes), bool)
    X = []
    for s in S:
        here = np.isin(part, sorted(s)) & ~assigned
        assigned |= here
        X.append(train_nodes[here])
    return Schedule(g, S, X, _swaps(S), kind="nodes")


# ---------------------------------------------------------------------------
# Edge Permutation Bias


@dataclass
class BiasReport:
    B: float
    d: list
    tallies: Optional[np.ndarray] = None  # (len(X), tracked nodes), if requested


def edge_permutation_bias(X, bucket_edges, num_nodes: int, keep_tallies: bool = False) -> BiasReport:
    """Spread of normalized cumulative per-node edge tallies across ``X``.

    ``bucket_edges`` maps a flat bucket id to its ``(m, 3)`` edge array (a
    dict, a list, or a callable).  A node's tally counts the edges seen so far
    that contain it (a self-loop counts once); it is divided by the node's
    total so every tally ends at 1.  Nodes without edges are not tracked.
    """
    get = bucket_edges if callable(bucket_edges) else (lambda b: bucket_edges[b])
    steps = []
    for buckets in X:
        parts = [get(int(b)) for b in buckets]
        e = np.concatenate(parts) if parts else np.empty((0, 3), np.int64)
        cnt = np.bincount(e[:, 0], minlength=num_nodes)
        other = e[e[:, 0] != e[:, 2], 2]
        cnt += np.bincount(other, minlength=num_nodes)
        steps.append(cnt)
    counts = np.array(steps)
    totals = counts.sum(axis=0)
    tracked = totals > 0
    if not tracked.any():
        return BiasReport(0.0, [0.0] * len(X))
    t = np.cumsum(counts[:, tracked], axis=0) / totals[tracked]
    d = (t.max(axis=1) - t.min(axis=1)).tolist()
    return BiasReport(float(max(d)), d, t if keep_tallies else None)


def store_bias(schedule: Schedule, store) -> BiasReport:
    cache = {}

    def get(b):
        if b not in cache:
            cache[b] = store.read_bucket(*divmod(b, store.p))
        return cache[b]

    return edge_permutation_bias(schedule.X, get, store.num_nodes)


# ---------------------------------------------------------------------------
# IO accounting


@dataclass
class IOReport:
    total_bytes: int
    partition_loads: int
    bucket_loads: int
    swaps: int
    num_sets: int
    min_read: int


def io_report(S, g: LogicalGrouping, partition_bytes, bucket_bytes) -> IOReport:
    """Bytes read from disk along ``S``: initial load plus every swap.

    ``partition_bytes`` has one entry per physical partition and
    ``bucket_bytes`` is ``(p, p)``.  A swap reads the incoming logical
    partition's node data and every bucket that becomes newly resident.
    """
    partition_bytes = np.asarray(partition_bytes)
    bucket_bytes = np.asarray(bucket_bytes).reshape(g.p, g.p)
    total = 0
    part_loads = 0
    bucket_loads = 0
    prev: frozenset = frozenset()
    for s in S:
        phys = g.expand(s)
        new = phys - prev
        total += int(partition_bytes[sorted(new)].sum())
        part_loads += len(new)
        idx = np.array(sorted(phys))
        newi = np.array(sorted(new))
        resident_buckets = np.zeros((g.p, g.p), bool)
        resident_buckets[np.ix_(idx, idx)] = True
        if prev:
            old = np.array(sorted(prev & phys))
            if len(old):
                resident_buckets[np.ix_(old, old)] = False
        total += int(bucket_bytes[resident_buckets].sum())
        bucket_loads += int(resident_buckets.sum())
        prev = phys
    nonzero = [x for x in np.concatenate([partition_bytes.ravel(), bucket_bytes.ravel()]) if x > 0]
    return IOReport(total, part_loads, bucket_loads, max(len(S) - 1, 0), len(S),
                    int(min(nonzero)) if nonzero else 0)


# ---------------------------------------------------------------------------
# auto-tuning


class TuningError(ValueError):
    pass


@dataclass
class TuningPlan:
    p: int
    l: int
    c: int
    c_l: int
    NO: float
    EO: float
    PO: float
    EBO: float
    alpha4: float
    F: float
    CPU: float
    in_memory: bool = False

    def memory_use(self, c: Optional[int] = None) -> float:
        c = self.c if c is None else c
        return c * self.PO + 2 * c * c * self.EBO + self.F

    def check(self) -> None:
        assert self.c_l >= 2, "c_l >= 2"
        assert self.p % self.l == 0, "l divides p"
        assert self.p * self.c_l == self.l * self.c, "p/c == l/c_l"
        assert self.memory_use() < self.CPU, "memory inequality"

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("p", "l", "c", "c_l", "NO", "EO", "PO", "EBO", "alpha4", "F", "CPU", "in_memory")}


def max_buffer_capacity(p: int, PO: float, EBO: float, cpu: float, fudge: float) -> int:
    """Largest c <= p with c*PO + 2*c^2*EBO + F < CPU (0 if none)."""
    c = 0
    for cand in range(1, p + 1):
        if cand * PO + 2 * cand * cand * EBO + fudge < cpu:
            c = cand
        else:
            break
    return c


def autotune(num_nodes: int, num_edges: int, d: int, bytes_per_edge: float, cpu: float,
             block: float, fudge: float, p: Optional[int] = None) -> TuningPlan:
    """Choose p, c and l for disk training.

    p = floor(min(NO/D, sqrt(EO/D))) unless given.  c is the largest buffer
    satisfying the memory inequality among values admitting an integral
    l = 2p/c that divides p (c even with c/2 | p).  If everything fits, the
    plan degenerates to a single in-memory set.
    """
    if min(num_nodes, num_edges, d, bytes_per_edge, cpu, block) <= 0 or fudge < 0:
        raise TuningError("all inputs must be positive")
    if cpu <= fudge:
        raise TuningError("CPU memory must exceed the fudge factor")
    NO = float(num_nodes) * d * 4
    EO = float(num_edges) * bytes_per_edge
    alpha4 = min(NO / block, math.sqrt(EO / block))
    if p is None:
        p = max(int(math.floor(alpha4)), 2)
    PO = NO / p
    EBO = EO / (p * p)
    c_max = max_buffer_capacity(p, PO, EBO, cpu, fudge)
    if c_max >= p:
        plan = TuningPlan(p, 2 if p % 2 == 0 else p, p, 2 if p % 2 == 0 else p, NO, EO, PO, EBO,
                          alpha4, fudge, cpu, in_memory=True)
        plan.check()
        return plan
    valid = [c for c in range(c_max, 1, -1) if c % 2 == 0 and p % (c // 2) == 0]
    if not valid:
        bigger = p
        while bigger < 16 * p + 64:
            bigger += 1
            if max_buffer_capacity(bigger, NO / bigger, EO / bigger ** 2, cpu, fudge) >= 2:
                break
        raise TuningError(
            f"insufficient memory for disk mode at computed p={p} (max buffer {c_max}); try p >= {bigger}"
        )
    c = valid[0]
    l = 2 * p // c
    plan = TuningPlan(p, l, c, 2, NO, EO, PO, EBO, alpha4, fudge, cpu)
    plan.check()
    return plan

"""Partition buffer: resident embedding blocks, resident edge buckets, swaps.

The buffer holds ``c`` physical partitions.  Embedding rows and optimizer
accumulators live in a slot arena; edge buckets among resident partitions
are cached and indexed as an :class:`InMemorySubgraph`.  Dirty partitions
are written back when evicted (write-back, not write-through).

:class:`InMemoryBuffer` has the same interface over a flat table and is
the oracle the disk path is compared against.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .graph_store import EdgeBucketStore, InMemorySubgraph, ResidencyError, build_subgraph
from .policies import Schedule, ScheduleError

logger = logging.getLogger(__name__)


@dataclass
class SwapStats:
    step: int
    evicted: list
    loaded: list
    bytes_read: int
    bytes_written: int
    rebuild_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class _Staged:
    """Data read ahead for one transition."""

    step: int
    loaded: tuple
    blocks: dict  # partition -> (emb, state)
    buckets: dict  # flat bucket id -> edges
    bytes_read: int


def _transition(schedule: Schedule, i: int):
    """(evicted, loaded) physical partitions going from S[i-1] to S[i]."""
    prev, cur = schedule.S[i - 1], schedule.S[i]
    out_l, in_l = prev - cur, cur - prev
    if len(out_l) != 1 or len(in_l) != 1:
        raise ScheduleError(
            f"sets {i - 1} and {i} differ by {len(out_l)} evicted / {len(in_l)} loaded logical partitions"
        )
    g = schedule.grouping
    return sorted(g.expand(out_l)), sorted(g.expand(in_l))


class _BufferBase:
    """Shared bookkeeping: residency check and counters."""

    num_nodes: int
    step: int

    def _resident_rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        pos = self._pos[ids]
        if len(pos) and pos.min() < 0:
            bad = ids[pos < 0]
            raise ResidencyError(f"nodes not resident in the buffer: {bad[:10].tolist()}")
        return pos

    def resident_nodes(self) -> np.ndarray:
        return self.subgraph.global_ids

    def bucket(self, b: int) -> np.ndarray:
        try:
            return self._buckets[b]
        except KeyError:
            raise ResidencyError(f"bucket {divmod(b, self.p)} is not resident") from None

    def examples(self, x) -> np.ndarray:
        """Edges of the flat bucket ids in ``x``, concatenated in order."""
        parts = [self.bucket(int(b)) for b in x]
        return np.concatenate(parts) if parts else np.empty((0, 3), np.int64)


class PartitionBuffer(_BufferBase):
    """Disk-backed buffer of ``c`` physical partitions.

    ``stats_path`` receives one JSON line per swap.  ``prefetch`` reads the
    next incoming partition on a worker thread; staged data only becomes
    visible in :meth:`load_set`, which the trainer calls between batches.
    """

    def __init__(self, store: EdgeBucketStore, c: int, prefetch: bool = False,
                 incremental: bool = True, stats_path=None):
        if c < 1:
            raise ValueError("buffer capacity must be positive")
        self.store = store
        self.p = store.p
        self.c = min(c, store.p)
        self.num_nodes = store.num_nodes
        self.dim = store.dim
        self.incremental = incremental
        self.stats_path = stats_path
        pm = store.partition_map
        self._slot_rows = int(pm.partition_sizes.max())
        self._arena = np.zeros((self.c * self._slot_rows, self.dim), np.float32)
        self._arena_state = np.zeros_like(self._arena)
        self._pos = np.full(self.num_nodes, -1, np.int64)
        self.slots: dict = {}  # physical partition -> slot index
        self.version = np.zeros(self.c, np.int64)
        self.dirty: set = set()
        self._buckets: dict = {}
        self.subgraph: Optional[InMemorySubgraph] = None
        self.current: Optional[int] = None
        self.swap_log: list = []
        self.bytes_read = 0
        self.bytes_written = 0
        self._pool = ThreadPoolExecutor(max_workers=1) if prefetch else None
        self._pending: Optional[Future] = None

    # residency -----------------------------------------------------------
    @property
    def resident(self) -> frozenset:
        return frozenset(self.slots)

    def _place(self, part: int, slot: int, emb: np.ndarray, state: np.ndarray) -> None:
        pm = self.store.partition_map
        nodes = pm.nodes_of(part)
        base = slot * self._slot_rows
        n = len(nodes)
        self._arena[base:base + n] = emb
        self._arena_state[base:base + n] = state
        self._pos[nodes] = base + pm.row_in_partition[nodes]
        self.slots[part] = slot
        self.version[slot] += 1

    def _evict(self, part: int) -> int:
        pm = self.store.partition_map
        slot = self.slots.pop(part)
        nodes = pm.nodes_of(part)
        written = 0
        if part in self.dirty:
            base = slot * self._slot_rows
            n = len(nodes)
            self.store.write_partition(part, self._arena[base:base + n], "embeddings")
            self.store.write_partition(part, self._arena_state[base:base + n], "embeddings_state")
            written = 2 * n * self.dim * 4
            self.dirty.discard(part)
        self._pos[nodes] = -1
        self.version[slot] += 1
        return written

    def _read_blocks(self, parts, keep) -> _Staged:
        """Read node blocks of ``parts`` and the buckets they form with ``keep``."""
        blocks, buckets, nbytes = {}, {}, 0
        rec = self.store.record_bytes
        for q in parts:
            emb = self.store.read_partition(q, "embeddings")
            state = self.store.read_partition(q, "embeddings_state")
            blocks[q] = (emb, state)
            nbytes += emb.nbytes + state.nbytes
        members = sorted(set(keep) | set(parts))
        new = set(parts)
        for i in members:
            for j in members:
                if i in new or j in new:
                    e = self.store.read_bucket(i, j)
                    buckets[i * self.p + j] = e
                    nbytes += len(e) * rec
        return _Staged(-1, tuple(parts), blocks, buckets, nbytes)

    # schedule execution --------------------------------------------------
    def load_set(self, schedule: Schedule, i: int) -> Optional[SwapStats]:
        """Make ``schedule.S[i]`` resident.  Returns swap stats for ``i > 0``."""
        target = schedule.physical(i)
        if len(target) > self.c:
            raise ScheduleError(f"set {i} has {len(target)} partitions but the buffer holds {self.c}")
        if i == 0 or self.current is None:
            if i != 0:
                raise ScheduleError(f"buffer is empty; cannot start at set {i}")
            self._full_load(target)
            self.current = 0
            return None
        if self.current != i - 1:
            raise ScheduleError(f"buffer holds set {self.current}, cannot move to set {i}")
        evicted, loaded = _transition(schedule, i)
        if self.resident != frozenset(schedule.physical(i - 1)):
            raise ScheduleError("resident partitions do not match the previous set")
        staged = self._take_prefetch(i, loaded)
        written = sum(self._evict(q) for q in evicted)
        if staged is None:
            staged = self._read_blocks(loaded, sorted(self.resident))
        free = sorted(set(range(self.c)) - set(self.slots.values()))
        for q, slot in zip(loaded, free):
            self._place(q, slot, *staged.blocks[q])
        t0 = time.perf_counter()
        gone = set(evicted)
        self._buckets = {b: e for b, e in self._buckets.items()
                         if b // self.p not in gone and b % self.p not in gone}
        self._buckets.update(staged.buckets)
        nodes = np.flatnonzero(self._pos >= 0)
        if self.incremental:
            new_edges = [staged.buckets[b] for b in sorted(staged.buckets)]
            new_edges = np.concatenate(new_edges) if new_edges else np.empty((0, 3), np.int64)
            self.subgraph = self.subgraph.swap(evicted, loaded, nodes, new_edges,
                                               self.store.partition_map.node_to_partition)
        else:
            self.subgraph = self._index(sorted(self.resident))
        rebuild_ms = (time.perf_counter() - t0) * 1e3
        self.current = i
        self.bytes_read += staged.bytes_read
        self.bytes_written += written
        stats = SwapStats(i, evicted, loaded, staged.bytes_read, written, rebuild_ms)
        self.swap_log.append(stats)
        if self.stats_path is not None:
            with open(self.stats_path, "a") as f:
                f.write(stats.to_json() + "\n")
        return stats

    def _index(self, parts) -> InMemorySubgraph:
        edges = [self._buckets[i * self.p + j] for i in parts for j in parts if i * self.p + j in self._buckets]
        edges = np.concatenate(edges) if edges else np.empty((0, 3), np.int64)
        nodes = np.flatnonzero(self._pos >= 0)
        return InMemorySubgraph(self.num_nodes, parts, nodes, edges, self.store.num_relations)

    def _full_load(self, target) -> None:
        self.flush()
        for q in list(self.slots):
            self._evict(q)
        self._buckets = {}
        staged = self._read_blocks(sorted(target), [])
        for slot, q in enumerate(sorted(target)):
            self._place(q, slot, *staged.blocks[q])
        self._buckets = staged.buckets
        self.subgraph = self._index(sorted(target))
        self.bytes_read += staged.bytes_read

    # prefetch ------------------------------------------------------------
    def prefetch_next(self, schedule: Schedule, i: int) -> None:
        """Start reading what set ``i + 1`` needs.  No-op without a worker."""
        if self._pool is None or i + 1 >= len(schedule.S) or self._pending is not None:
            return
        try:
            _, loaded = _transition(schedule, i + 1)
        except ScheduleError:
            return  # load_set reports it
        keep = sorted(schedule.physical(i + 1) - set(loaded))
        fut = self._pool.submit(self._read_blocks, loaded, keep)
        fut.step, fut.loaded = i + 1, tuple(loaded)
        self._pending = fut

    def _take_prefetch(self, i: int, loaded) -> Optional[_Staged]:
        fut, self._pending = self._pending, None
        if fut is None:
            return None
        try:
            staged = fut.result()
        except Exception as exc:  # degrade to a synchronous read
            logger.warning("prefetch failed (%s); reading synchronously", exc)
            return None
        if fut.step != i or fut.loaded != tuple(loaded):
            return None
        return staged

    # embedding access ----------------------------------------------------
    def gather(self, ids):
        """Rows and optimizer state of ``ids`` in request order."""
        pos = self._resident_rows(ids)
        return self._arena[pos], self._arena_state[pos]

    def scatter(self, ids, rows, state=None) -> None:
        """Store optimizer-updated rows for ``ids`` and mark their partitions dirty."""
        ids = np.asarray(ids, dtype=np.int64)
        pos = self._resident_rows(ids)
        self._arena[pos] = rows
        if state is not None:
            self._arena_state[pos] = state
        parts = np.unique(self.store.partition_map.node_to_partition[ids])
        self.dirty.update(int(q) for q in parts)

    scatter_add = scatter

    def flush(self) -> int:
        """Write back every dirty resident partition; returns bytes written."""
        pm = self.store.partition_map
        written = 0
        for q in sorted(self.dirty & set(self.slots)):
            base = self.slots[q] * self._slot_rows
            n = int(pm.partition_sizes[q])
            self.store.write_partition(q, self._arena[base:base + n], "embeddings")
            self.store.write_partition(q, self._arena_state[base:base + n], "embeddings_state")
            written += 2 * n * self.dim * 4
        self.dirty.clear()
        self.bytes_written += written
        return written

    def end_epoch(self) -> None:
        """Flush and drop everything; the next epoch starts with a full load."""
        if self._pending is not None:
            self._pending.result()
            self._pending = None
        self.flush()
        for q in list(self.slots):
            self._evict(q)
        self._buckets = {}
        self.current = None

    def table(self):
        """Whole embedding table and state in node-id order (flushes first)."""
        self.flush()
        return self.store.read_table("embeddings"), self.store.read_table("embeddings_state")

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)


class InMemoryBuffer(_BufferBase):
    """Flat-table buffer.

    Residency follows the schedule exactly like :class:`PartitionBuffer`
    (so sampling and negatives see the same nodes), but rows never leave
    memory and the subgraph is rebuilt from scratch for every set.
    """

    def __init__(self, store: EdgeBucketStore, table: Optional[np.ndarray] = None,
                 state: Optional[np.ndarray] = None):
        self.store = store
        self.p = store.p
        self.num_nodes = store.num_nodes
        self.emb = store.read_table("embeddings") if table is None else np.array(table, np.float32)
        self.emb_state = (store.read_table("embeddings_state") if state is None
                          else np.array(state, np.float32))
        self.dim = self.emb.shape[1]
        self._pos = np.full(self.num_nodes, -1, np.int64)
        self._all_buckets = {b: store.read_bucket(*divmod(b, self.p)) for b in range(self.p * self.p)
                             if store.bucket_counts[b]}
        self._buckets: dict = {}
        self.subgraph: Optional[InMemorySubgraph] = None
        self.current: Optional[int] = None
        self.swap_log: list = []
        self.bytes_read = 0
        self.bytes_written = 0

    def load_set(self, schedule: Schedule, i: int):
        parts = sorted(schedule.physical(i))
        if i > 0:
            if self.current != i - 1:
                raise ScheduleError(f"buffer holds set {self.current}, cannot move to set {i}")
            _transition(schedule, i)
        n2p = self.store.partition_map.node_to_partition
        members = np.isin(n2p, parts)
        self._pos = np.where(members, np.arange(self.num_nodes), -1)
        self._buckets = {i * self.p + j: self._all_buckets[i * self.p + j]
                         for i in parts for j in parts if i * self.p + j in self._all_buckets}
        edges = [self._buckets[b] for b in sorted(self._buckets)]
        edges = np.concatenate(edges) if edges else np.empty((0, 3), np.int64)
        self.subgraph = InMemorySubgraph(self.num_nodes, parts, np.flatnonzero(members), edges,
                                         self.store.num_relations)
        self.current = i
        return None

    def prefetch_next(self, schedule, i) -> None:
        pass

    def gather(self, ids):
        pos = self._resident_rows(ids)
        return self.emb[pos], self.emb_state[pos]

    def scatter(self, ids, rows, state=None) -> None:
        pos = self._resident_rows(ids)
        self.emb[pos] = rows
        if state is not None:
            self.emb_state[pos] = state

    scatter_add = scatter

    def flush(self) -> int:
        return 0

    def end_epoch(self) -> None:
        self.current = None

    def table(self):
        return self.emb.copy(), self.emb_state.copy()

    def close(self) -> None:
        pass

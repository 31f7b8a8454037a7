"""Edge-list ingestion, node partitioning and the on-disk edge bucket store.

A preprocessed dataset is a directory::

    header.json            p, record width, counts, seed, embedding dim
    partitions.npy         node id -> physical partition
    edges.bin              little-endian (src, rel, dst) records, buckets row-major
    bucket_offsets.bin     one (u64 byte offset, u64 edge count) per bucket (i, j)
    embeddings.bin         float32 rows, one contiguous region per partition
    embeddings_state.bin   optimizer accumulators, same layout as embeddings.bin
    valid_edges.npy ...    evaluation splits (link prediction)
    labels.npy ...         labels and node splits (node classification)
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_U32_MAX = 2**32 - 1


class IngestError(ValueError):
    pass


class StoreIntegrityError(RuntimeError):
    pass


class ResidencyError(KeyError):
    """A node or partition was requested that is not resident in memory."""


@dataclass
class RawGraph:
    """Dense-id edge list plus task splits.

    ``edges`` holds the training edges as an ``(m, 3)`` int64 array of
    ``(src, rel, dst)``.  Evaluation edges live in ``valid_edges`` and
    ``test_edges``.  For node classification ``labels`` has one entry per node
    (``-1`` for unlabeled) and the node splits are id arrays.
    """

    num_nodes: int
    num_relations: int
    edges: np.ndarray
    valid_edges: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))
    test_edges: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))
    labels: Optional[np.ndarray] = None
    train_nodes: Optional[np.ndarray] = None
    valid_nodes: Optional[np.ndarray] = None
    test_nodes: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    node_names: Optional[list] = None
    relation_names: Optional[list] = None

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1

    def validate(self) -> None:
        for name in ("edges", "valid_edges", "test_edges"):
            e = getattr(self, name)
            if len(e) == 0:
                continue
            if e[:, [0, 2]].min() < 0 or e[:, [0, 2]].max() >= self.num_nodes:
                raise IngestError(f"{name}: node id out of range [0, {self.num_nodes})")
            if e[:, 1].min() < 0 or e[:, 1].max() >= self.num_relations:
                raise IngestError(f"{name}: relation id out of range [0, {self.num_relations})")
        splits = [s for s in (self.train_nodes, self.valid_nodes, self.test_nodes) if s is not None]
        if splits:
            allnodes = np.concatenate(splits)
            if len(np.unique(allnodes)) != len(allnodes):
                raise IngestError("node splits overlap")


class _Vocab:
    """Dictionary encoder shared across split files."""

    def __init__(self):
        self.index: dict[str, int] = {}
        self.names: list[str] = []

    def encode(self, tok: str) -> int:
        i = self.index.get(tok)
        if i is None:
            i = len(self.names)
            self.index[tok] = i
            self.names.append(tok)
        return i


def _read_tsv(path: Path, ncols: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != ncols or any(p == "" for p in parts):
                raise IngestError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {line!r}")
            rows.append(parts)
    return rows


def _all_int(tokens: Iterable[str]) -> bool:
    try:
        for t in tokens:
            if int(t) < 0:
                return False
    except ValueError:
        return False
    return True


def _encode_rows(rows_per_file, ncols, nodes: _Vocab, rels: _Vocab, numeric: bool):
    out = []
    for rows in rows_per_file:
        if ncols == 2:
            rows = [(r[0], "0", r[1]) for r in rows]
        if numeric:
            arr = np.array([[int(a), int(b), int(c)] for a, b, c in rows], dtype=np.int64).reshape(-1, 3)
        else:
            arr = np.array(
                [[nodes.encode(a), rels.encode(b), nodes.encode(c)] for a, b, c in rows], dtype=np.int64
            ).reshape(-1, 3)
        out.append(arr)
    return out


def _check_width(num_nodes: int, num_relations: int, id_width: int) -> None:
    if id_width == 32 and max(num_nodes, num_relations) - 1 > _U32_MAX:
        raise IngestError("ids exceed 32-bit range; rerun with id_width=64")


def ingest(path, format: str = "tsv-3col", id_width: int = 32, extra_splits: Sequence = ()) -> RawGraph:
    """Parse an edge file into a :class:`RawGraph` with dense ids.

    ``format`` is ``tsv-2col`` (``src dst``), ``tsv-3col`` (``src rel dst``)
    or ``binary`` (little-endian unsigned ``(src, rel, dst)`` triples of
    ``id_width`` bits).  Integer ids are kept as-is; anything else is
    dictionary encoded.  ``extra_splits`` are (valid, test) files of the same
    format that share the vocabulary.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "binary":
        dt = np.dtype("<u4" if id_width == 32 else "<u8")
        arrays = [np.fromfile(p, dtype=dt).astype(np.int64) for p in [path, *extra_splits]]
        for p, a in zip([path, *extra_splits], arrays):
            if len(a) % 3:
                raise IngestError(f"{p}: file size is not a multiple of the record size")
        arrays = [a.reshape(-1, 3) for a in arrays]
        node_names = rel_names = None
    elif format in ("tsv-2col", "tsv-3col"):
        ncols = 2 if format == "tsv-2col" else 3
        rows_per_file = [_read_tsv(Path(p), ncols) for p in [path, *extra_splits]]
        tokens_nodes = (r[i] for rows in rows_per_file for r in rows for i in (0, ncols - 1))
        numeric = _all_int(tokens_nodes) and (ncols == 2 or _all_int(r[1] for rows in rows_per_file for r in rows))
        nodes, rels = _Vocab(), _Vocab()
        arrays = _encode_rows(rows_per_file, ncols, nodes, rels, numeric)
        node_names = None if numeric else nodes.names
        rel_names = None if numeric or ncols == 2 else rels.names
    else:
        raise ValueError(f"unknown format {format!r}")

    if len(arrays[0]) == 0:
        raise IngestError(f"{path}: no edges")
    everything = np.concatenate(arrays)
    if node_names is not None:
        num_nodes = len(node_names)
    else:
        num_nodes = int(max(everything[:, 0].max(), everything[:, 2].max())) + 1
    num_relations = len(rel_names) if rel_names is not None else int(everything[:, 1].max()) + 1
    _check_width(num_nodes, num_relations, id_width)

    empty = np.empty((0, 3), np.int64)
    g = RawGraph(
        num_nodes=num_nodes,
        num_relations=num_relations,
        edges=arrays[0],
        valid_edges=arrays[1] if len(arrays) > 1 else empty,
        test_edges=arrays[2] if len(arrays) > 2 else empty,
        node_names=node_names,
        relation_names=rel_names,
    )
    g.validate()
    logger.info(
        "ingested %s: %d nodes, %d relations, %d train / %d valid / %d test edges",
        path, g.num_nodes, g.num_relations, len(g.edges), len(g.valid_edges), len(g.test_edges),
    )
    return g


def ingest_split_dir(directory, id_width: int = 32) -> RawGraph:
    """Read a ``train.txt``/``valid.txt``/``test.txt`` directory (FB15k-237 layout)."""
    d = Path(directory)
    extra = [d / n for n in ("valid.txt", "test.txt") if (d / n).exists()]
    return ingest(d / "train.txt", "tsv-3col", id_width=id_width, extra_splits=extra)


@dataclass
class PartitionMap:
    p: int
    node_to_partition: np.ndarray

    def __post_init__(self):
        self.node_to_partition = np.asarray(self.node_to_partition, dtype=np.int64)
        n = len(self.node_to_partition)
        self.partition_sizes = np.bincount(self.node_to_partition, minlength=self.p)
        # file rows: partitions in order, node-id order inside each region
        order = np.lexsort((np.arange(n), self.node_to_partition))
        self.node_to_row = np.empty(n, np.int64)
        self.node_to_row[order] = np.arange(n)
        self.partition_offsets = np.concatenate([[0], np.cumsum(self.partition_sizes)])
        self.row_in_partition = self.node_to_row - self.partition_offsets[self.node_to_partition]

    @property
    def num_nodes(self) -> int:
        return len(self.node_to_partition)

    def nodes_of(self, partition: int) -> np.ndarray:
        return np.flatnonzero(self.node_to_partition == partition)


def assign_partitions(g, p: int, mode: str = "random", seed: int = 0, train_nodes=None) -> PartitionMap:
    """Split nodes into ``p`` physical partitions.

    ``random`` gives a uniformly random balanced assignment.  ``train-first``
    fills partitions ``0..k-1`` with the training nodes in id order (each
    partition holds ``ceil(n / p)`` nodes) and scatters the remaining nodes
    over the leftover capacity at random.
    """
    n = g.num_nodes if isinstance(g, RawGraph) else int(g)
    if p < 1:
        raise ValueError("p must be >= 1")
    if p > n:
        raise ValueError(f"p={p} exceeds the number of nodes ({n})")
    rng = np.random.default_rng(seed)
    if mode == "random":
        perm = rng.permutation(n)
        parts = np.empty(n, np.int64)
        sizes = np.full(p, n // p)
        sizes[: n % p] += 1
        parts[perm] = np.repeat(np.arange(p), sizes)
        return PartitionMap(p, parts)
    if mode != "train-first":
        raise ValueError(f"unknown partition mode {mode!r}")
    if train_nodes is None:
        train_nodes = getattr(g, "train_nodes", None)
    if train_nodes is None:
        raise ValueError("train-first partitioning requires a training node set")
    train = np.sort(np.asarray(train_nodes, dtype=np.int64))
    cap = math.ceil(n / p)
    parts = np.full(n, -1, np.int64)
    parts[train] = np.arange(len(train)) // cap
    free = np.full(p, cap) - np.bincount(parts[train], minlength=p)
    slots = np.repeat(np.arange(p), free)
    rest = np.flatnonzero(parts < 0)
    parts[rest] = rng.permutation(slots)[: len(rest)]
    return PartitionMap(p, parts)


def num_train_partitions(pm: PartitionMap, train_nodes) -> int:
    """Number of leading partitions holding training nodes (train-first layout)."""
    return int(pm.node_to_partition[np.asarray(train_nodes)].max()) + 1


def node_block_bytes(partition_sizes, dim: int) -> np.ndarray:
    """Bytes moved per partition load: float32 embedding rows plus their optimizer state."""
    return np.asarray(partition_sizes, dtype=np.int64) * dim * 4 * 2


def init_embeddings(num_nodes: int, dim: int, seed: int) -> np.ndarray:
    """Uniform in [-0.5/d, 0.5/d], drawn in node-id order so values do not depend on p."""
    rng = np.random.default_rng(seed)
    bound = 0.5 / dim
    return rng.uniform(-bound, bound, size=(num_nodes, dim)).astype(np.float32)


class EdgeBucketStore:
    """Read access to a preprocessed dataset directory.

    After :func:`build_buckets` the store is immutable apart from the two
    embedding files, which only the partition buffer writes to.  ``read_delay``
    injects artificial latency (seconds) into every disk read.
    """

    def __init__(self, directory, read_delay: float = 0.0):
        self.dir = Path(directory)
        self.read_delay = read_delay
        hdr_path = self.dir / "header.json"
        if not hdr_path.exists():
            raise FileNotFoundError(hdr_path)
        self.header = json.loads(hdr_path.read_text())
        h = self.header
        self.p = h["p"]
        self.id_width = h["id_width"]
        self.num_nodes = h["num_nodes"]
        self.num_relations = h["num_relations"]
        self.num_edges = h["num_edges"]
        self.dim = h["dim"]
        self.seed = h["seed"]
        self.record_dtype = np.dtype("<u4" if self.id_width == 32 else "<u8")
        self.record_bytes = 3 * self.record_dtype.itemsize
        self.partition_map = PartitionMap(self.p, np.load(self.dir / "partitions.npy"))
        idx = np.fromfile(self.dir / "bucket_offsets.bin", dtype="<u8")
        if len(idx) != 2 * self.p * self.p:
            raise StoreIntegrityError("offsets index has the wrong number of entries")
        idx = idx.reshape(self.p * self.p, 2).astype(np.int64)
        self.bucket_byte_offsets = idx[:, 0]
        self.bucket_counts = idx[:, 1]
        self.emb_dir = self.dir
        self._check_integrity()

    def attach_embeddings(self, directory, table: np.ndarray, state: Optional[np.ndarray] = None) -> None:
        """Write ``table`` (node-id order) as a working copy under ``directory`` and use it.

        Training reads and writes the copy, so the dataset directory stays untouched.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        table = np.asarray(table, dtype=np.float32)
        if table.shape[0] != self.num_nodes:
            raise ValueError(f"table has {table.shape[0]} rows, store has {self.num_nodes} nodes")
        self.emb_dir = directory
        self.dim = int(table.shape[1])
        self.write_table(table, "embeddings")
        self.write_table(np.zeros_like(table) if state is None else state, "embeddings_state")

    def initial_table(self) -> np.ndarray:
        """Embedding table as written at preprocessing time (node-id order)."""
        raw = np.fromfile(self.dir / "embeddings.bin", dtype="<f4").reshape(self.num_nodes, -1)
        return raw[self.partition_map.node_to_row]

    def _check_integrity(self):
        size = os.path.getsize(self.dir / "edges.bin")
        expected = np.concatenate([[0], np.cumsum(self.bucket_counts)[:-1]]) * self.record_bytes
        if not np.array_equal(expected, self.bucket_byte_offsets):
            raise StoreIntegrityError("bucket offsets are not contiguous row-major")
        if int(self.bucket_counts.sum()) * self.record_bytes != size:
            raise StoreIntegrityError(
                f"offsets index covers {int(self.bucket_counts.sum())} edges but edges.bin has {size} bytes"
            )
        if int(self.bucket_counts.sum()) != self.num_edges:
            raise StoreIntegrityError("edge count in header disagrees with offsets index")
        emb = os.path.getsize(self.dir / "embeddings.bin")
        if emb != self.num_nodes * self.dim * 4:
            raise StoreIntegrityError("embedding file size disagrees with header")

    # buckets -------------------------------------------------------------
    def bucket_id(self, i: int, j: int) -> int:
        return i * self.p + j

    def bucket_count(self, i: int, j: int) -> int:
        return int(self.bucket_counts[i * self.p + j])

    def bucket_bytes(self) -> np.ndarray:
        """(p, p) array of bucket sizes in bytes."""
        return (self.bucket_counts * self.record_bytes).reshape(self.p, self.p)

    def partition_bytes(self) -> np.ndarray:
        return node_block_bytes(self.partition_map.partition_sizes, self.dim)

    def read_bucket(self, i: int, j: int) -> np.ndarray:
        b = i * self.p + j
        count = int(self.bucket_counts[b])
        if count == 0:
            return np.empty((0, 3), np.int64)
        if self.read_delay:
            time.sleep(self.read_delay)
        with open(self.dir / "edges.bin", "rb") as f:
            f.seek(int(self.bucket_byte_offsets[b]))
            data = np.fromfile(f, dtype=self.record_dtype, count=3 * count)
        return data.astype(np.int64).reshape(count, 3)

    def read_buckets(self, pairs: Iterable[tuple[int, int]]) -> np.ndarray:
        parts = [self.read_bucket(i, j) for i, j in pairs]
        return np.concatenate(parts) if parts else np.empty((0, 3), np.int64)

    def all_edges(self) -> np.ndarray:
        return self.read_buckets((i, j) for i in range(self.p) for j in range(self.p))

    # embeddings ----------------------------------------------------------
    def _region(self, partition: int) -> tuple[int, int]:
        pm = self.partition_map
        return int(pm.partition_offsets[partition]), int(pm.partition_sizes[partition])

    def read_partition(self, partition: int, which: str = "embeddings") -> np.ndarray:
        start, size = self._region(partition)
        if self.read_delay:
            time.sleep(self.read_delay)
        with open(self.emb_dir / f"{which}.bin", "rb") as f:
            f.seek(start * self.dim * 4)
            data = np.fromfile(f, dtype="<f4", count=size * self.dim)
        return data.reshape(size, self.dim)

    def write_partition(self, partition: int, block: np.ndarray, which: str = "embeddings") -> None:
        start, size = self._region(partition)
        block = np.ascontiguousarray(block, dtype="<f4")
        if block.shape != (size, self.dim):
            raise ValueError(f"block shape {block.shape} != {(size, self.dim)}")
        fd = os.open(self.emb_dir / f"{which}.bin", os.O_WRONLY)
        try:
            os.pwrite(fd, block.tobytes(), start * self.dim * 4)
        finally:
            os.close(fd)

    def read_table(self, which: str = "embeddings") -> np.ndarray:
        """Whole table in node-id order."""
        raw = np.fromfile(self.emb_dir / f"{which}.bin", dtype="<f4").reshape(self.num_nodes, self.dim)
        return raw[self.partition_map.node_to_row]

    def write_table(self, table: np.ndarray, which: str = "embeddings") -> None:
        out = np.empty_like(table, dtype="<f4")
        out[self.partition_map.node_to_row] = table
        out.tofile(self.emb_dir / f"{which}.bin")

    # splits / labels -----------------------------------------------------
    def load_array(self, name: str) -> Optional[np.ndarray]:
        path = self.dir / f"{name}.npy"
        return np.load(path) if path.exists() else None

    @property
    def features_fixed(self) -> bool:
        return bool(self.header.get("features_fixed", False))

    @property
    def num_classes(self) -> int:
        return int(self.header.get("num_classes", 0))


def build_buckets(
    g: RawGraph,
    pm: PartitionMap,
    out_dir,
    dim: int = 50,
    seed: int = 0,
    id_width: int = 32,
) -> EdgeBucketStore:
    """Write the bucketed edge file, offsets index and embedding files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if pm.num_nodes != g.num_nodes:
        raise ValueError("partition map does not cover every node")
    _check_width(g.num_nodes, g.num_relations, id_width)
    p = pm.p
    e = g.edges
    bucket = pm.node_to_partition[e[:, 0]] * p + pm.node_to_partition[e[:, 2]]
    order = np.argsort(bucket, kind="stable")
    counts = np.bincount(bucket, minlength=p * p).astype(np.int64)
    rec = np.dtype("<u4" if id_width == 32 else "<u8")
    e[order].astype(rec).tofile(out / "edges.bin")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]) * 3 * rec.itemsize
    np.stack([offsets, counts], axis=1).astype("<u8").tofile(out / "bucket_offsets.bin")
    np.save(out / "partitions.npy", pm.node_to_partition.astype(np.int32))

    if g.features is not None:
        table = np.asarray(g.features, dtype=np.float32)
        dim = table.shape[1]
    else:
        table = init_embeddings(g.num_nodes, dim, seed)
    rows = np.empty_like(table)
    rows[pm.node_to_row] = table
    rows.astype("<f4").tofile(out / "embeddings.bin")
    np.zeros_like(rows, dtype="<f4").tofile(out / "embeddings_state.bin")

    for name in ("valid_edges", "test_edges", "labels", "train_nodes", "valid_nodes", "test_nodes"):
        arr = getattr(g, name)
        if arr is not None and len(arr):
            np.save(out / f"{name}.npy", np.asarray(arr, dtype=np.int64))
    for name in ("node_names", "relation_names"):
        names = getattr(g, name)
        if names is not None:
            (out / f"{name}.txt").write_text("\n".join(names) + "\n", encoding="utf-8")

    header = {
        "format_version": FORMAT_VERSION,
        "p": p,
        "id_width": id_width,
        "num_nodes": g.num_nodes,
        "num_relations": g.num_relations,
        "num_edges": int(len(e)),
        "dim": int(dim),
        "seed": int(seed),
        "features_fixed": g.features is not None,
        "num_classes": g.num_classes,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    logger.info("wrote %d edges into %d buckets under %s", len(e), p * p, out)
    return EdgeBucketStore(out)


class InMemorySubgraph:
    """Resident edges in two sorted copies plus per-node offset tables.

    ``out_edges`` is sorted by (src, dst, rel) and ``in_edges`` by
    (dst, src, rel); both hold ``(src, rel, dst)`` rows.  ``local_of`` maps a
    global node id to its row in the offset tables (``-1`` if not resident).
    """

    def __init__(self, num_nodes: int, partitions, resident_nodes: np.ndarray, edges: np.ndarray,
                 num_relations: Optional[int] = None, _sorted: Optional[tuple] = None):
        self.num_nodes = num_nodes
        self.partitions = frozenset(int(x) for x in partitions)
        self.global_ids = np.sort(np.asarray(resident_nodes, dtype=np.int64))
        self.local_of = np.full(num_nodes, -1, np.int64)
        self.local_of[self.global_ids] = np.arange(len(self.global_ids))
        if _sorted is None:
            edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
            self.out_edges = edges[np.lexsort((edges[:, 1], edges[:, 2], edges[:, 0]))]
            self.in_edges = edges[np.lexsort((edges[:, 1], edges[:, 0], edges[:, 2]))]
        else:
            self.out_edges, self.in_edges = _sorted
        if num_relations is None:
            num_relations = int(self.out_edges[:, 1].max(initial=-1)) + 1
        self.num_relations = max(num_relations, 1)
        if len(self.out_edges) and (self.local_of[self.out_edges[:, 0]].min() < 0
                                    or self.local_of[self.out_edges[:, 2]].min() < 0):
            raise ResidencyError("edge endpoint outside the resident node set")
        n = len(self.global_ids)
        self.out_offsets = np.zeros(n + 1, np.int64)
        self.in_offsets = np.zeros(n + 1, np.int64)
        np.cumsum(np.bincount(self.local_of[self.out_edges[:, 0]], minlength=n), out=self.out_offsets[1:])
        np.cumsum(np.bincount(self.local_of[self.in_edges[:, 2]], minlength=n), out=self.in_offsets[1:])

    @property
    def num_edges(self) -> int:
        return len(self.out_edges)

    def is_resident(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        ok = (nodes >= 0) & (nodes < self.num_nodes)
        res = np.zeros(nodes.shape, bool)
        res[ok] = self.local_of[nodes[ok]] >= 0
        return res

    def to_local(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        if not self.is_resident(nodes).all():
            bad = nodes[~self.is_resident(nodes)]
            raise ResidencyError(f"nodes not resident in memory: {bad[:10].tolist()}")
        return self.local_of[nodes]

    def out_neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        lv = self.to_local([v])[0]
        rows = self.out_edges[self.out_offsets[lv]:self.out_offsets[lv + 1]]
        return rows[:, 2], rows[:, 1]

    def in_neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        lv = self.to_local([v])[0]
        rows = self.in_edges[self.in_offsets[lv]:self.in_offsets[lv + 1]]
        return rows[:, 0], rows[:, 1]

    def degrees(self, nodes, direction: str = "incoming") -> np.ndarray:
        lv = self.to_local(nodes)
        deg = np.zeros(len(lv), np.int64)
        if direction in ("incoming", "both"):
            deg += self.in_offsets[lv + 1] - self.in_offsets[lv]
        if direction in ("outgoing", "both"):
            deg += self.out_offsets[lv + 1] - self.out_offsets[lv]
        return deg

    def swap(self, evicted, loaded, resident_nodes, new_edges, node_to_partition) -> "InMemorySubgraph":
        """Incremental rebuild: drop edges touching ``evicted`` partitions and merge in ``new_edges``."""
        evicted = np.asarray(sorted(evicted), dtype=np.int64)
        parts = (self.partitions - set(evicted.tolist())) | set(int(x) for x in loaded)
        new_edges = np.asarray(new_edges, dtype=np.int64).reshape(-1, 3)

        def keep(edges):
            if not len(evicted) or not len(edges):
                return edges
            gone = np.isin(node_to_partition[edges[:, 0]], evicted) | np.isin(node_to_partition[edges[:, 2]], evicted)
            return edges[~gone]

        out_e = _merge_sorted(keep(self.out_edges), new_edges, (0, 2, 1))
        in_e = _merge_sorted(keep(self.in_edges), new_edges, (2, 0, 1))
        return InMemorySubgraph(self.num_nodes, parts, resident_nodes, None, self.num_relations, _sorted=(out_e, in_e))


def _merge_sorted(base: np.ndarray, extra: np.ndarray, key_cols) -> np.ndarray:
    """Merge ``extra`` into ``base`` (already sorted lexicographically on ``key_cols``).

    Only the incoming edges are sorted; they are then spliced into ``base`` at
    their insertion points, so the result equals a full sort of the union.
    """
    if not len(extra):
        return base
    a, b, c = key_cols
    extra = extra[np.lexsort((extra[:, c], extra[:, b], extra[:, a]))]
    if not len(base):
        return extra
    hi = max(int(base.max()), int(extra.max())) + 1
    base_keys = _row_keys(base, key_cols, hi)
    extra_keys = _row_keys(extra, key_cols, hi)
    if base_keys is None:
        both = np.concatenate([base, extra])
        return both[np.lexsort((both[:, c], both[:, b], both[:, a]))]
    at = np.searchsorted(base_keys, extra_keys, side="right")
    return np.insert(base, at, extra, axis=0)


def _row_keys(edges: np.ndarray, key_cols, hi: int):
    """Collapse three id columns (all < ``hi``) into one sortable int64 key, or None on overflow."""
    if hi ** 3 >= 2**62:
        return None
    a, b, c = key_cols
    return (edges[:, a] * hi + edges[:, b]) * hi + edges[:, c]


def build_subgraph(store: EdgeBucketStore, partitions) -> InMemorySubgraph:
    """Load the c^2 buckets among ``partitions`` and index them."""
    parts = sorted(int(x) for x in partitions)
    for q in parts:
        if not 0 <= q < store.p:
            raise ResidencyError(f"partition {q} does not exist")
    edges = store.read_buckets((i, j) for i in parts for j in parts)
    nodes = np.flatnonzero(np.isin(store.partition_map.node_to_partition, parts))
    return InMemorySubgraph(store.num_nodes, parts, nodes, edges, store.num_relations)


def subgraph_from_graph(g: RawGraph) -> InMemorySubgraph:
    """Everything resident; handy for tests and full-graph evaluation."""
    return InMemorySubgraph(g.num_nodes, [0], np.arange(g.num_nodes), g.edges, g.num_relations)

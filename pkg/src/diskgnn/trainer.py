"""Epoch orchestration: schedule -> buffer -> sampler -> engine -> metrics."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .buffer import InMemoryBuffer, PartitionBuffer
from .dense import ALL, SamplerConfig, multi_hop_sample
from .engine import (
    Batch, ModelState, backward_and_step, build_filter_index, evaluate_lp, evaluate_nc,
    gnn_forward, init_model, load_checkpoint, lp_targets, parse_eval_mode, save_checkpoint,
)
from .graph_store import EdgeBucketStore, build_subgraph, init_embeddings, num_train_partitions
from .policies import (
    Schedule, autotune, beta_schedule, comet, edge_permutation_bias, identity_grouping, nc_schedule,
)

logger = logging.getLogger(__name__)

_TASKS = {"lp": "lp", "link-prediction": "lp", "nc": "nc", "node-classification": "nc"}


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    task: str = "link-prediction"
    model: str = "distmult"  # distmult | linear | sage-K | additive-K
    dim: int = 50
    fanouts: str = ""  # comma separated, -1 = all neighbors; default 10 per layer
    direction: str = "both"
    lr: float = 0.1
    negatives: int = 500
    batch_size: int = 1000
    epochs: int = 10
    seed: int = 0
    storage: str = "in-memory"  # in-memory | disk
    l: str = "auto"
    c: str = "auto"
    policy: str = ""  # comet | beta | nc; default by task
    cpu_memory: float = 4e9
    block_size: float = 4096
    fudge: float = 0.0
    eval_mode: str = "all"
    filtered: bool = True
    eval_every: int = 1
    prefetch: bool = True
    incremental_rebuild: bool = True
    compute_bias: bool = False
    read_delay: float = 0.0

    # derived views ---------------------------------------------------------
    @property
    def task_code(self) -> str:
        try:
            return _TASKS[self.task]
        except KeyError:
            raise ValueError(f"task must be link-prediction or node-classification, got {self.task!r}") from None

    @property
    def layer_kind(self) -> str:
        name = self.model.split("-")[0]
        if name in ("distmult", "linear"):
            return "none"
        if name in ("sage", "additive"):
            return name
        raise ValueError(f"unknown model {self.model!r}; use distmult, linear, sage-K or additive-K")

    @property
    def depth(self) -> int:
        if self.layer_kind == "none":
            return 0
        try:
            k = int(self.model.split("-", 1)[1])
        except (IndexError, ValueError):
            raise ValueError(f"model {self.model!r} needs a depth, e.g. sage-1") from None
        if k < 1:
            raise ValueError("GNN depth must be at least 1")
        return k

    @property
    def fanout_tuple(self) -> tuple:
        if not str(self.fanouts).strip():
            return (10,) * self.depth
        vals = tuple(int(x) for x in str(self.fanouts).split(",") if x.strip())
        return tuple(ALL if v < 0 else v for v in vals)

    @property
    def policy_name(self) -> str:
        return self.policy or ("nc" if self.task_code == "nc" else "comet")

    def validate(self) -> None:
        self.task_code, self.layer_kind
        if self.task_code == "lp" and self.model.split("-")[0] == "linear":
            raise ValueError("link prediction uses distmult (decoder only), sage-K or additive-K")
        if self.task_code == "nc" and self.model == "distmult":
            raise ValueError("node classification uses linear, sage-K or additive-K")
        if len(self.fanout_tuple) != self.depth:
            raise ValueError(f"fanouts {self.fanout_tuple} do not match model depth {self.depth}")
        SamplerConfig(self.fanout_tuple, self.direction)
        if self.storage not in ("in-memory", "disk"):
            raise ValueError(f"storage must be in-memory or disk, got {self.storage!r}")
        if self.policy_name not in ("comet", "beta", "nc"):
            raise ValueError(f"unknown policy {self.policy_name!r}")
        parse_eval_mode(self.eval_mode)
        for name in ("lr", "negatives", "batch_size", "epochs"):
            if getattr(self, name) < 0 or (name != "lr" and name != "epochs" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, text):
    kind = _FIELDS[name].type
    if not isinstance(text, str):
        return text
    if kind == "bool":
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if kind == "int":
        return int(float(text)) if "e" in text.lower() else int(text)
    if kind == "float":
        return float(text)
    return text.strip()


def make_config(values: dict) -> TrainConfig:
    """TrainConfig from string/typed values; unknown keys are an error listing the valid ones."""
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise KeyError(f"unknown config key(s) {unknown}; valid keys: {sorted(_FIELDS)}")
    cfg = TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides or {})
    return make_config(values)


@dataclass
class EpochMetrics:
    epoch: int
    wall_seconds: float
    loss: float
    metric: str
    value: Optional[float]
    io_bytes_read: int
    io_bytes_written: int
    swaps: int
    num_sets: int
    examples: int
    bias: Optional[float] = None

    def check(self) -> None:
        for k, v in dataclasses.asdict(self).items():
            if isinstance(v, float) and not np.isfinite(v):
                raise FloatingPointError(f"metric {k} is not finite")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: ModelState
    embeddings: np.ndarray
    embeddings_state: np.ndarray
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)


def _seeds(seed: int, epoch: int):
    """Independent seeds for the schedule and the batch stream of one epoch."""
    ss = np.random.SeedSequence([seed, epoch])
    a, b = ss.spawn(2)
    return int(a.generate_state(1)[0]), np.random.default_rng(b)


def _eval_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5EED])


class Trainer:
    """Owns the store, model and buffer for one training run.

    ``schedule_fn(epoch) -> Schedule`` overrides the policy (used to force
    a shared schedule when comparing disk and in-memory runs).
    """

    def __init__(self, cfg: TrainConfig, store: Optional[EdgeBucketStore] = None,
                 schedule_fn: Optional[Callable[[int], Schedule]] = None, work_dir=None, echo: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.echo = echo
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.store = store if store is not None else EdgeBucketStore(cfg.dataset, read_delay=cfg.read_delay)
        self.task = cfg.task_code
        self.learn_embeddings = not self.store.features_fixed
        base = self.store.initial_table()
        if self.learn_embeddings:
            table = init_embeddings(self.store.num_nodes, cfg.dim, cfg.seed)
        else:
            table = base
            if cfg.dim != table.shape[1]:
                logger.info("using feature dimension %d instead of dim=%d", table.shape[1], cfg.dim)
        self.store.attach_embeddings(Path(work_dir) if work_dir else self.out / "work", table)
        self.dim = table.shape[1]
        self.model = init_model(
            self.task, self.dim, self.store.num_relations, self.store.num_classes,
            cfg.layer_kind, cfg.depth, seed=cfg.seed,
        )
        self.sampler = SamplerConfig(cfg.fanout_tuple, cfg.direction)
        self.schedule_fn = schedule_fn
        self.p = self.store.p
        self.c, self.l = self._capacity()
        if cfg.storage == "disk":
            self.buffer = PartitionBuffer(self.store, self.c, prefetch=cfg.prefetch,
                                          incremental=cfg.incremental_rebuild,
                                          stats_path=self.out / "buffer_stats.jsonl")
        else:
            self.buffer = InMemoryBuffer(self.store)
        self.labels = self.store.load_array("labels")
        self.train_nodes = self.store.load_array("train_nodes")
        if self.task == "nc" and (self.labels is None or self.train_nodes is None):
            raise ValueError("node classification needs labels.npy and train_nodes.npy in the dataset")
        self._filter = None
        self.epoch = 0

    # setup ---------------------------------------------------------------
    def _capacity(self):
        cfg, p = self.cfg, self.store.p
        if cfg.storage == "in-memory":
            return p, 1
        if cfg.c == "auto" or cfg.l == "auto":
            plan = autotune(self.store.num_nodes, self.store.num_edges, self.dim, self.store.record_bytes,
                            cfg.cpu_memory, cfg.block_size, cfg.fudge, p=p)
            c = plan.c if cfg.c == "auto" else int(cfg.c)
            l = plan.l if cfg.l == "auto" else int(cfg.l)
            if cfg.c != "auto" and cfg.l == "auto":
                l = 2 * p // c if c < p else 2
            return c, l
        return int(cfg.c), int(cfg.l)

    def schedule(self, epoch: int, seed: int) -> Schedule:
        if self.schedule_fn is not None:
            return self.schedule_fn(epoch)
        cfg, p = self.cfg, self.p
        counts = self.store.bucket_counts
        if cfg.storage == "in-memory" or self.c >= p:
            S = [frozenset(range(p))]
            if self.task == "nc":
                return Schedule(identity_grouping(p), S, [np.sort(self.train_nodes)], [], kind="nodes")
            X = [np.flatnonzero(counts)]
            return Schedule(identity_grouping(p), S, X, [])
        if self.task == "nc" or cfg.policy_name == "nc":
            n2p = self.store.partition_map.node_to_partition
            k = num_train_partitions(self.store.partition_map, self.train_nodes)
            return nc_schedule(n2p, self.train_nodes, self.c, p, seed, k_train=k)
        if cfg.policy_name == "beta":
            return beta_schedule(p, self.c, counts, seed)
        return comet(p, self.l, self.c, seed, counts)

    # batches -------------------------------------------------------------
    def _lp_batch(self, edges: np.ndarray, rng: np.random.Generator) -> Batch:
        resident = self.buffer.resident_nodes()
        negs = resident[rng.integers(0, len(resident), size=(len(edges), self.cfg.negatives))]
        targets, src_idx, dst_idx, neg_idx = lp_targets(edges, negs)
        dense = multi_hop_sample(self.buffer.subgraph, targets, self.sampler, rng)
        H0, H0_state = self.buffer.gather(dense.node_ids)
        return Batch(dense, H0, H0_state, edges=edges, negatives=negs,
                     src_idx=src_idx, dst_idx=dst_idx, neg_idx=neg_idx)

    def _nc_batch(self, nodes: np.ndarray, rng: np.random.Generator) -> Batch:
        dense = multi_hop_sample(self.buffer.subgraph, nodes, self.sampler, rng)
        H0, H0_state = self.buffer.gather(dense.node_ids)
        return Batch(dense, H0, H0_state, labels=self.labels[nodes])

    def train_epoch(self) -> EpochMetrics:
        cfg = self.cfg
        epoch = self.epoch
        t0 = time.perf_counter()
        sched_seed, rng = _seeds(cfg.seed, epoch)
        sched = self.schedule(epoch, sched_seed)
        read0, written0 = self.buffer.bytes_read, self.buffer.bytes_written
        losses, weights = [], []
        examples = 0
        for i in range(len(sched)):
            self.buffer.load_set(sched, i)
            self.buffer.prefetch_next(sched, i)
            if sched.kind == "nodes":
                items = np.asarray(sched.X[i], dtype=np.int64)
            else:
                items = self.buffer.examples(sched.X[i])
            order = rng.permutation(len(items))
            for start in range(0, len(items), cfg.batch_size):
                chunk = items[order[start:start + cfg.batch_size]]
                batch = self._lp_batch(chunk, rng) if self.task == "lp" else self._nc_batch(chunk, rng)
                loss, update = backward_and_step(batch, self.model, cfg.lr, self.learn_embeddings)
                if update is not None:
                    self.buffer.scatter(update.node_ids, update.rows, update.state)
                losses.append(loss)
                weights.append(len(chunk))
                examples += len(chunk)
        self.buffer.end_epoch()
        expected = len(self.train_nodes) if self.task == "nc" else self.store.num_edges
        if examples != expected:
            raise RuntimeError(f"epoch consumed {examples} examples, expected {expected}")
        self.model.check_finite()
        bias = None
        if cfg.compute_bias and sched.kind == "buckets":
            bias = edge_permutation_bias(sched.X, lambda b: self.store.read_bucket(*divmod(b, self.p)),
                                         self.store.num_nodes).B
        value = None
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            value = self.evaluate("valid")
        m = EpochMetrics(
            epoch=epoch,
            wall_seconds=time.perf_counter() - t0,
            loss=float(np.average(losses, weights=weights)) if losses else 0.0,
            metric="mrr" if self.task == "lp" else "accuracy",
            value=value,
            io_bytes_read=self.buffer.bytes_read - read0,
            io_bytes_written=self.buffer.bytes_written - written0,
            swaps=len(sched.swaps),
            num_sets=len(sched),
            examples=examples,
            bias=bias,
        )
        m.check()
        self.epoch += 1
        return m

    # evaluation ----------------------------------------------------------
    def tables(self):
        return self.buffer.table()

    def evaluate(self, split: str = "valid", mode=None) -> Optional[float]:
        emb, _ = self.tables()
        return evaluate_split(self.model, emb, self.store, self.cfg, split, mode, filter_index=self._filters())

    def _filters(self):
        if self.task == "lp" and self.cfg.filtered and self._filter is None:
            self._filter = dataset_filter(self.store)
        return self._filter if self.cfg.filtered else None

    def run(self) -> TrainResult:
        history = []
        metrics_path = self.out / "metrics.jsonl"
        for _ in range(self.cfg.epochs):
            m = self.train_epoch()
            history.append(m)
            line = m.to_json()
            with open(metrics_path, "a") as f:
                f.write(line + "\n")
            if self.echo:
                print(line, flush=True)
        emb, state = self.tables()
        save_checkpoint(self.out / "checkpoint.bin", self.model, emb, state)
        (self.out / "checkpoint.json").write_text(json.dumps(dataclasses.asdict(self.cfg), indent=2) + "\n")
        final = {"final": True, "epochs": self.cfg.epochs, "split": "test",
                 "metric": "mrr" if self.task == "lp" else "accuracy",
                 "eval_mode": self.cfg.eval_mode,
                 "value": self.evaluate("test")}
        if self.echo:
            print(json.dumps(final, sort_keys=True), flush=True)
        self.buffer.close()
        return TrainResult(self.model, emb, state, history, final)


def dataset_filter(store: EdgeBucketStore) -> dict:
    sets = [store.all_edges(), store.load_array("valid_edges"), store.load_array("test_edges")]
    return build_filter_index(*[s for s in sets if s is not None])


def node_representations(model: ModelState, table: np.ndarray, store: EdgeBucketStore, cfg: TrainConfig,
                         nodes, chunk: int = 2048, subgraph=None) -> np.ndarray:
    """Final-layer representations of ``nodes`` over the whole graph."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if model.num_layers == 0:
        return table[nodes]
    sub = subgraph if subgraph is not None else build_subgraph(store, range(store.p))
    scfg = SamplerConfig(cfg.fanout_tuple, cfg.direction)
    rng = _eval_rng(cfg.seed)
    out = np.empty((len(nodes), model.dim), table.dtype)
    for start in range(0, len(nodes), chunk):
        part = nodes[start:start + chunk]
        dense = multi_hop_sample(sub, part, scfg, rng)
        H, _ = gnn_forward(dense, table[dense.node_ids], model)
        out[start:start + chunk] = H
    return out


def evaluate_split(model: ModelState, table: np.ndarray, store: EdgeBucketStore, cfg: TrainConfig,
                   split: str = "test", mode=None, filter_index=None) -> Optional[float]:
    """MRR (link prediction) or accuracy (node classification) on a stored split."""
    mode = parse_eval_mode(cfg.eval_mode if mode is None else mode)
    if model.task == "lp":
        edges = store.load_array(f"{split}_edges")
        if edges is None or not len(edges):
            return None
        reps = node_representations(model, table, store, cfg, np.arange(store.num_nodes))
        return evaluate_lp(model, reps, edges, mode, filter_index if mode == "all" else None,
                           seed=cfg.seed)
    nodes = store.load_array(f"{split}_nodes")
    labels = store.load_array("labels")
    if nodes is None or not len(nodes):
        return None
    reps = node_representations(model, table, store, cfg, np.sort(nodes))
    logits = reps @ model.cls_W + model.cls_b
    return evaluate_nc(logits, labels[np.sort(nodes)])


def evaluate_checkpoint(checkpoint, dataset, mode=None, split: str = "test") -> dict:
    """Evaluate a saved checkpoint; the sidecar JSON supplies sampling settings."""
    checkpoint = Path(checkpoint)
    model, emb, _ = load_checkpoint(checkpoint)
    side = checkpoint.with_suffix(".json")
    values = json.loads(side.read_text()) if side.exists() else {}
    values.update(dataset=str(dataset))
    cfg = make_config(values)
    store = EdgeBucketStore(dataset)
    filt = dataset_filter(store) if (model.task == "lp" and cfg.filtered) else None
    value = evaluate_split(model, emb, store, cfg, split, mode, filter_index=filt)
    return {"split": split, "metric": "mrr" if model.task == "lp" else "accuracy",
            "eval_mode": mode or cfg.eval_mode, "value": value}


def train(cfg: TrainConfig, **kwargs) -> TrainResult:
    return Trainer(cfg, **kwargs).run()

"""Command line: preprocess, plan, train, eval, bias.

Run as ``python -m diskgnn <command> ...`` or via the ``diskgnn`` script.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import datasets
from .graph_store import (
    EdgeBucketStore, IngestError, assign_partitions, build_buckets, ingest, ingest_split_dir, node_block_bytes,
)
from .policies import (
    autotune, beta_schedule, comet, edge_permutation_bias, io_report, nc_schedule,
)
from .trainer import Trainer, evaluate_checkpoint, load_config

_UNITS = {"": 1, "b": 1, "k": 1e3, "kb": 1e3, "m": 1e6, "mb": 1e6, "g": 1e9, "gb": 1e9, "t": 1e12, "tb": 1e12,
          "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40}


def parse_bytes(text) -> float:
    """``4GB``, ``512MiB``, ``4e9`` -> bytes."""
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*([a-zA-Z]*)\s*", str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"cannot parse byte size {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower()]


def parse_seeds(text) -> list:
    """``3``, ``0,1,2`` or ``0:10``."""
    text = str(text)
    if ":" in text:
        a, b = text.split(":", 1)
        return list(range(int(a), int(b)))
    return [int(x) for x in text.split(",") if x.strip()]


def _system_memory() -> float:
    try:
        import os
        return float(os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES"))
    except (ValueError, OSError, AttributeError):
        return 8e9


def _read_labels(path, g) -> None:
    """``node<TAB>label<TAB>split`` lines (split in train/valid/test) attached to ``g``."""
    index = {name: i for i, name in enumerate(g.node_names)} if g.node_names else None
    labels = np.full(g.num_nodes, -1, np.int64)
    splits = {"train": [], "valid": [], "test": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in splits:
            raise IngestError(f"{path}:{lineno}: expected node, label, train|valid|test")
        v = index[parts[0]] if index is not None else int(parts[0])
        labels[v] = int(parts[1])
        splits[parts[2]].append(v)
    g.labels = labels
    g.train_nodes, g.valid_nodes, g.test_nodes = (np.array(sorted(splits[k]), np.int64)
                                                  for k in ("train", "valid", "test"))


def cmd_preprocess(args) -> int:
    src = Path(args.input)
    g = ingest_split_dir(src, args.id_width) if src.is_dir() else ingest(src, args.format, args.id_width)
    if args.labels:
        _read_labels(args.labels, g)
    if args.p == "auto":
        plan = autotune(g.num_nodes, g.num_edges, args.dim, 3 * args.id_width // 8,
                        args.cpu or _system_memory(), args.block, args.fudge)
        p = plan.p
    else:
        p = int(args.p)
    pm = assign_partitions(g, p, args.mode, args.seed, g.train_nodes)
    store = build_buckets(g, pm, args.out_dir, dim=args.dim, seed=args.seed, id_width=args.id_width)
    print(json.dumps({"out_dir": str(args.out_dir), "p": p, "num_nodes": store.num_nodes,
                      "num_relations": store.num_relations, "num_edges": store.num_edges}))
    return 0


def _stats(dataset: str):
    if dataset.lower() in ("fb15k-237", "fb15k237"):
        s = datasets.FB15K237_STATS
        return s["num_nodes"], s["num_edges"], None
    store = EdgeBucketStore(dataset)
    return store.num_nodes, store.num_edges, store


def cmd_plan(args) -> int:
    n, m, store = _stats(args.dataset)
    bpe = args.bytes_per_edge or (store.record_bytes if store is not None else 12)
    plan = autotune(n, m, args.dim, bpe, args.cpu, args.block, args.fudge, p=args.p)
    print(json.dumps(plan.as_dict(), sort_keys=True))
    return 0


def _overrides(tokens) -> dict:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ValueError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ValueError(f"override {tok} is missing a value")
            val = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def cmd_train(args, extra) -> int:
    cfg = load_config(args.config, _overrides(extra))
    Trainer(cfg).run()
    return 0


def cmd_eval(args) -> int:
    print(json.dumps(evaluate_checkpoint(args.checkpoint, args.dataset, args.mode, args.split), sort_keys=True))
    return 0


def _bias_source(args):
    """(p, bucket edges getter, bucket counts, partition bytes, bucket bytes, num nodes, n2p, train nodes)."""
    if args.dataset == "synthetic":
        g = datasets.bias_graph(seed=0)
        pm = assign_partitions(g, args.p or 16, seed=0)
        p = pm.p
        b = pm.node_to_partition[g.edges[:, 0]] * p + pm.node_to_partition[g.edges[:, 2]]
        order = np.argsort(b, kind="stable")
        counts = np.bincount(b, minlength=p * p)
        starts = np.concatenate([[0], np.cumsum(counts)])
        e = g.edges[order]
        get = lambda x: e[starts[x]:starts[x + 1]]  # noqa: E731
        part_bytes = node_block_bytes(pm.partition_sizes, 50)
        return p, get, counts, part_bytes, counts * 12, g.num_nodes, pm.node_to_partition, None
    store = EdgeBucketStore(args.dataset)
    cache = {}

    def get(x):
        if x not in cache:
            cache[x] = store.read_bucket(*divmod(int(x), store.p))
        return cache[x]

    return (store.p, get, store.bucket_counts, store.partition_bytes(), store.bucket_bytes().ravel(),
            store.num_nodes, store.partition_map.node_to_partition, store.load_array("train_nodes"))


def cmd_bias(args) -> int:
    p, get, counts, part_bytes, bucket_bytes, n, n2p, train_nodes = _bias_source(args)
    c = args.c or max(p // 4, 2)
    l = args.l or (2 * p // c if c < p else 2)
    rows = []
    for seed in parse_seeds(args.seed):
        if args.policy == "comet":
            sch = comet(p, l, c, seed, counts)
        elif args.policy == "beta":
            sch = beta_schedule(p, c, counts, seed)
        else:
            if train_nodes is None:
                raise ValueError("the nc policy needs a dataset with train_nodes")
            sch = nc_schedule(n2p, train_nodes, c, p, seed)
        if sch.kind == "nodes":
            rep = edge_permutation_bias(sch.X, lambda v: np.array([[v, 0, v]]), n)
        else:
            rep = edge_permutation_bias(sch.X, get, n)
        io = io_report(sch.S, sch.grouping, part_bytes, bucket_bytes)
        rows.append({"seed": seed, "B": rep.B, "num_sets": len(sch), "swaps": len(sch.swaps),
                     "io_bytes": io.total_bytes})
    out = {"policy": args.policy, "p": p, "c": c, "l": l if args.policy == "comet" else None,
           "B": float(np.mean([r["B"] for r in rows])), "runs": rows}
    print(json.dumps(out, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diskgnn", description="Disk-based GNN training toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", help="ingest an edge list and write a partitioned store")
    pp.add_argument("input", help="edge file, or a directory with train/valid/test.txt")
    pp.add_argument("out_dir")
    pp.add_argument("--p", default="16", help="number of physical partitions or 'auto'")
    pp.add_argument("--mode", default="random", choices=["random", "train-first"])
    pp.add_argument("--format", default="tsv-3col", choices=["tsv-2col", "tsv-3col", "binary"])
    pp.add_argument("--id-width", type=int, default=32, choices=[32, 64])
    pp.add_argument("--dim", type=int, default=50)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--labels", help="node<TAB>label<TAB>split file for node classification")
    pp.add_argument("--cpu", type=parse_bytes, default=None, help="memory budget for --p auto")
    pp.add_argument("--block", type=parse_bytes, default=4096)
    pp.add_argument("--fudge", type=parse_bytes, default=0)

    pl = sub.add_parser("plan", help="auto-tune p, c and l")
    pl.add_argument("dataset", help="preprocessed store directory or 'fb15k-237'")
    pl.add_argument("--cpu", type=parse_bytes, required=True)
    pl.add_argument("--block", type=parse_bytes, required=True)
    pl.add_argument("--fudge", type=parse_bytes, default=0)
    pl.add_argument("--dim", type=int, default=50)
    pl.add_argument("--bytes-per-edge", type=float, default=None)
    pl.add_argument("--p", type=int, default=None, help="keep p fixed instead of deriving it")

    tr = sub.add_parser("train", help="train from a key=value config; --key value overrides")
    tr.add_argument("config")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("dataset")
    ev.add_argument("--mode", default=None, help="all or sampled:N")
    ev.add_argument("--split", default="test", choices=["train", "valid", "test"])

    bi = sub.add_parser("bias", help="edge permutation bias of a policy's schedule")
    bi.add_argument("dataset", help="preprocessed store directory or 'synthetic'")
    bi.add_argument("--policy", required=True, choices=["comet", "beta", "nc"])
    bi.add_argument("--seed", default="0", help="seed, comma list or range a:b (B is averaged)")
    bi.add_argument("--c", type=int, default=None)
    bi.add_argument("--l", type=int, default=None)
    bi.add_argument("--p", type=int, default=None, help="partitions for the synthetic graph")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command != "train":
        ap.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "preprocess":
            return cmd_preprocess(args)
        if args.command == "plan":
            return cmd_plan(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_bias(args)
    except (KeyError, ValueError, FileNotFoundError, RuntimeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

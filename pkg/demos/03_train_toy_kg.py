"""Preprocess a synthetic knowledge graph and train it three ways:
in memory, from disk with one schedule, and from disk with the other."""
import tempfile
from pathlib import Path

from diskgnn.datasets import synthetic_kg
from diskgnn.graph_store import assign_partitions, build_buckets
from diskgnn.trainer import Trainer, make_config

root = Path(tempfile.mkdtemp())
g = synthetic_kg(num_nodes=1000, num_relations=6, num_edges=20000, num_clusters=10, seed=0)
build_buckets(g, assign_partitions(g, 8, seed=0), root / "store", dim=32, seed=0)
print(f"{g.num_nodes} nodes, {len(g.edges)} train edges, {len(g.test_edges)} test edges")

common = dict(dataset=str(root / "store"), dim=32, lr=0.1, negatives=50, batch_size=500, epochs=5,
              eval_every=0, model="distmult")
runs = {
    "in-memory": dict(storage="in-memory"),
    "disk comet": dict(storage="disk", policy="comet", c="2", l="8"),
    "disk beta": dict(storage="disk", policy="beta", c="2"),
}
for name, extra in runs.items():
    cfg = make_config(dict(common, out_dir=str(root / name.replace(" ", "_")), **extra))
    res = Trainer(cfg, echo=False).run()
    last = res.history[-1]
    print(f"{name:11s} test MRR {res.final['value']:.3f}  sets/epoch {last.num_sets:2d}  "
          f"read {last.io_bytes_read / 1e6:.1f} MB/epoch")

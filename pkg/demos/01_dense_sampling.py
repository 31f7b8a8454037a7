"""Walk through a two-hop sample on a five-node graph, then compare node
counts against layer-wise resampling on a larger random graph."""
import numpy as np

from diskgnn.dense import ALL, SamplerConfig, advance_layer, build_repr_map, multi_hop_sample, naive_multi_hop_sample
from diskgnn.engine import layer_forward_additive
from diskgnn.graph_store import InMemorySubgraph

A, B, C, D, E = range(5)
names = "ABCDE"
edges = np.array([[C, 0, A], [D, 0, A], [D, 0, B], [A, 0, B], [E, 0, C], [A, 0, D]])
sub = InMemorySubgraph(5, [0], np.arange(5), edges, 1)

d = build_repr_map(multi_hop_sample(sub, [A, B], SamplerConfig((ALL, ALL)), np.random.default_rng(0)))
for g in range(d.num_groups):
    print("delta group", g, [names[v] for v in d.group(g)])
for v in d.owners:
    print(" ", names[v], "<-", [names[u] for u in d.neighbors_of(int(v))])

# each layer consumes the sample, then drops the outermost group
H = np.eye(5, dtype=np.float32)[d.node_ids]  # one-hot rows make the sums readable
cur = d
while cur.k:
    H = layer_forward_additive(cur, H)
    cur = advance_layer(cur)
    print("after layer:", [names[v] for v in cur.node_ids])
print("counts of each base node inside A's and B's outputs:\n", H.astype(int))

# bigger graph: reuse keeps the sample smaller than resampling every hop
rng = np.random.default_rng(1)
n, m = 20000, 200000
e = np.stack([rng.integers(0, n, m), np.zeros(m, np.int64), rng.integers(0, n, m)], 1)
big = InMemorySubgraph(n, [0], np.arange(n), e, 1)
for k in (2, 3):
    targets = rng.choice(n, 100, replace=False)
    cfg = SamplerConfig((10,) * k)
    dense = len(multi_hop_sample(big, targets, cfg, np.random.default_rng(0)).node_ids)
    naive = naive_multi_hop_sample(big, targets, cfg, np.random.default_rng(0))["nodes"]
    print(f"k={k}: {dense} nodes with reuse, {naive} with resampling")

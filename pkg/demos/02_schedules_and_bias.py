"""Partition schedules on a synthetic graph: how many sets, how much IO,
and how unevenly node edges are spread through the epoch."""
import numpy as np

from diskgnn.datasets import bias_graph
from diskgnn.graph_store import assign_partitions, node_block_bytes
from diskgnn.policies import beta_schedule, comet, edge_permutation_bias, io_report

g = bias_graph(num_nodes=2000, out_degree=100, seed=0)
p = 16
pm = assign_partitions(g, p, seed=0)
n2p = pm.node_to_partition
b = n2p[g.edges[:, 0]] * p + n2p[g.edges[:, 2]]
order = np.argsort(b, kind="stable")
counts = np.bincount(b, minlength=p * p)
starts = np.concatenate([[0], np.cumsum(counts)])
sorted_edges = g.edges[order]
buckets = [sorted_edges[starts[x]:starts[x + 1]] for x in range(p * p)]
part_bytes = node_block_bytes(pm.partition_sizes, 50)  # embeddings + optimizer state at d=50
bucket_bytes = counts * 12


def summary(sch):
    rep = edge_permutation_bias(sch.X, buckets, g.num_nodes)
    io = io_report(sch.S, sch.grouping, part_bytes, bucket_bytes)
    sizes = np.array([counts[x].sum() for x in sch.X], float)
    return rep.B, io.total_bytes / 1e6, len(sch), sizes.std() / sizes.mean()


print("policy  l   B      IO(MB)  |S|  cv(X)")
for seed in range(3):
    B, io, n_sets, cv = summary(beta_schedule(p, 4, counts, seed))
    print(f"beta    -   {B:.3f}  {io:6.2f}  {n_sets:3d}  {cv:.2f}")
    B, io, n_sets, cv = summary(comet(p, 8, 4, seed, counts))
    print(f"comet   8   {B:.3f}  {io:6.2f}  {n_sets:3d}  {cv:.2f}")

# more logical partitions: fewer bytes moved, more sets, more bias
for l in (4, 8, 16):
    rows = np.array([summary(comet(p, l, 8, s, counts))[:3] for s in range(10)])
    print(f"c=8 l={l:2d}: B={rows[:, 0].mean():.3f} IO={rows[:, 1].mean():.2f}MB |S|={rows[:, 2].mean():.1f}")

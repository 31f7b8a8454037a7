"""Disk-based GNN training: delta-encoded sampling, partition schedules, buffer runtime."""
from .dense import ALL, DenseSample, SamplerConfig, multi_hop_sample
from .graph_store import EdgeBucketStore, RawGraph, assign_partitions, build_buckets, ingest
from .policies import autotune, beta_schedule, comet, edge_permutation_bias, nc_schedule
from .trainer import TrainConfig, Trainer, make_config, train

__all__ = [
    "ALL", "DenseSample", "SamplerConfig", "multi_hop_sample",
    "EdgeBucketStore", "RawGraph", "assign_partitions", "build_buckets", "ingest",
    "autotune", "beta_schedule", "comet", "edge_permutation_bias", "nc_schedule",
    "TrainConfig", "Trainer", "make_config", "train",
]
__version__ = "0.1.0"

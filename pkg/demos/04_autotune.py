"""Sizing p, c and l from a memory budget."""
from diskgnn.policies import TuningError, autotune

# a 1M-node graph with 100M edges
for cpu in (2e9, 1e9, 4e8):
    try:
        plan = autotune(10**6, 10**8, 100, 8, cpu, 4096, 0)
        print(f"CPU {cpu / 1e9:.1f} GB -> p={plan.p} c={plan.c} l={plan.l} c_l={plan.c_l} "
              f"uses {plan.memory_use() / 1e9:.2f} GB")
    except TuningError as exc:
        print(f"CPU {cpu / 1e9:.1f} GB -> {exc}")

# fixed p: 1 GB partitions, 4.5 GB budget, 0.25 GB held back
plan = autotune(2 * 10**7, 1000, 100, 8, 4.5e9, 4096, 0.25e9, p=8)
print("p=8:", plan.as_dict())

# a small graph fits outright
print("small graph in memory:", autotune(14541, 272115, 50, 12, 4e9, 4096, 0).in_memory)

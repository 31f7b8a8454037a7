import itertools
from collections import Counter

import numpy as np
import pytest

from diskgnn.datasets import bias_graph
from diskgnn.graph_store import assign_partitions, node_block_bytes
from diskgnn.policies import (
    ScheduleError, TuningError, autotune, beta_assign, beta_schedule, comet, comet_assign, comet_schedule,
    edge_permutation_bias, group_logical, identity_grouping, io_report, max_buffer_capacity, nc_schedule,
)

# the hand-written l=4, c_l=2 sequence, zero-indexed
SIX_SETS = [frozenset(s) for s in ({0, 1}, {0, 2}, {0, 3}, {2, 3}, {1, 3}, {1, 2})]


def scan_schedule(sch, counts=None):
    """Brute-force check of coverage, residency and the one-swap rule."""
    p = sch.grouping.p
    seen = Counter(int(b) for x in sch.X for b in x)
    for b in range(p * p):
        want = 0 if counts is not None and counts[b] == 0 else 1
        assert seen[b] == want, f"bucket {b} assigned {seen[b]} times"
    for i, x in enumerate(sch.X):
        phys = sch.physical(i)
        for b in x:
            assert divmod(int(b), p)[0] in phys and divmod(int(b), p)[1] in phys
    for a, b in zip(sch.S, sch.S[1:]):
        assert len(a - b) == 1 and len(b - a) == 1 and len(a) == len(b)


def bucketed(g, pm):
    p = pm.p
    n2p = pm.node_to_partition
    b = n2p[g.edges[:, 0]] * p + n2p[g.edges[:, 2]]
    order = np.argsort(b, kind="stable")
    counts = np.bincount(b, minlength=p * p)
    starts = np.concatenate([[0], np.cumsum(counts)])
    e = g.edges[order]
    return [e[starts[x]:starts[x + 1]] for x in range(p * p)], counts


@pytest.fixture(scope="module")
def bias_setup():
    g = bias_graph(num_nodes=600, out_degree=30, seed=0)
    pm = assign_partitions(g, 16, seed=0)
    edges, counts = bucketed(g, pm)
    return g, pm, edges, counts


class TestGrouping:
    def test_identity_when_l_equals_p(self):
        g = group_logical(6, 6, seed=3)
        assert all(len(x) == 1 for x in g.groups)
        assert sorted(int(x[0]) for x in g.groups) == list(range(6))

    def test_balanced(self):
        g = group_logical(8, 4, seed=1)
        assert [len(x) for x in g.groups] == [2, 2, 2, 2]
        np.testing.assert_array_equal(np.sort(np.concatenate(g.groups)), np.arange(8))
        assert g.expand([0]) == frozenset(g.groups[0].tolist())

    def test_seeds_differ(self):
        a, b = group_logical(8, 4, seed=0), group_logical(8, 4, seed=1)
        assert [x.tolist() for x in a.groups] != [x.tolist() for x in b.groups]

    def test_uniform_over_groupings(self):
        # p=4, l=2 has 4!/(2!2!) = 6 labeled groupings
        freq = Counter(tuple(group_logical(4, 2, seed=s).groups[0].tolist()) for s in range(3000))
        assert len(freq) == 6
        np.testing.assert_allclose(np.array(list(freq.values())) / 3000, 1 / 6, atol=0.03)

    def test_errors(self):
        with pytest.raises(ValueError, match="valid choices"):
            group_logical(8, 3)
        with pytest.raises(ValueError):
            group_logical(8, 1)


class TestComet:
    def test_degenerate(self):
        g = group_logical(8, 4)
        assert comet_schedule(g, 4) == [frozenset(range(4))]
        sch = comet(8, 4, 8)
        assert len(sch) == 1 and sch.swaps == []
        scan_schedule(sch)

    def test_needs_two_per_set(self):
        with pytest.raises(ValueError):
            comet_schedule(group_logical(8, 4), 1)

    def test_hand_sequence_covers_all_pairs(self):
        pairs = {frozenset(x) for s in SIX_SETS for x in itertools.combinations(s, 2)}
        assert len(pairs) == 6
        # each 2-set covers one pair, so six sets is the minimum
        assert all(len(a ^ b) == 2 for a, b in zip(SIX_SETS, SIX_SETS[1:]))

    @pytest.mark.parametrize("l,c_l", [(4, 2), (8, 2), (8, 4), (16, 4), (6, 3)])
    def test_greedy_covers_pairs(self, l, c_l):
        for seed in range(5):
            S = comet_schedule(group_logical(l * 2, l, seed), c_l, seed)
            covered = {frozenset(x) for s in S for x in itertools.combinations(s, 2)}
            assert len(covered) == l * (l - 1) // 2
            assert all(len(s) == c_l for s in S)
            assert all(len(a - b) == 1 for a, b in zip(S, S[1:]))
            assert len(S) >= l * (l - 1) / (c_l * (c_l - 1))

    def test_random_tiebreak_also_covers(self):
        S = comet_schedule(group_logical(16, 8, 0), 2, 0, tiebreak="random")
        assert len({frozenset(x) for s in S for x in itertools.combinations(s, 2)}) == 28

    def test_full_schedule(self, bias_setup):
        _, _, _, counts = bias_setup
        for seed in range(3):
            sch = comet(16, 8, 4, seed, counts)
            scan_schedule(sch, counts)
            assert len(sch.swaps) == len(sch) - 1

    def test_ratio_error(self):
        with pytest.raises(ValueError):
            comet(16, 8, 3)


class TestCometAssign:
    def test_single_option_bucket(self):
        g = identity_grouping(4)
        X = comet_assign(SIX_SETS, g, seed=0)
        # bucket (0, 1) is only co-resident in the first set
        assert 0 * 4 + 1 in X[0].tolist() and 1 * 4 + 0 in X[0].tolist()
        assert sum(len(x) for x in X) == 16

    def test_deterministic(self):
        g = identity_grouping(4)
        a, b = comet_assign(SIX_SETS, g, seed=5), comet_assign(SIX_SETS, g, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_uncovered_bucket(self):
        with pytest.raises(ScheduleError):
            comet_assign(SIX_SETS[:3], identity_grouping(4))

    def test_skips_empty_buckets(self):
        counts = np.ones(16, np.int64)
        counts[5] = 0
        X = comet_assign(SIX_SETS, identity_grouping(4), 0, counts)
        assert 5 not in np.concatenate(X).tolist()

    def test_balance_on_pairwise_schedule(self, bias_setup):
        # each logical pair co-resides exactly once in SIX_SETS
        _, _, _, counts = bias_setup
        ratios = []
        for seed in range(50):
            g = group_logical(16, 4, seed)
            X = comet_assign(SIX_SETS, g, seed, counts)
            sizes = np.array([counts[x].sum() for x in X])
            ratios.append(sizes.max() / sizes.min())
        assert np.mean(np.array(ratios) <= 2.0) >= 0.95


class TestBeta:
    def test_new_partition_buckets_follow_load(self):
        X = beta_assign([frozenset({0, 1, 2}), frozenset({0, 1, 3}), frozenset({0, 2, 3}), frozenset({1, 2, 3})], 4)
        got = sorted(divmod(int(b), 4) for b in X[1])
        assert got == [(0, 3), (1, 3), (3, 0), (3, 1), (3, 3)]
        assert len(X[0]) == 9

    def test_single_set(self):
        sch = beta_schedule(6, 6)
        assert len(sch) == 1 and len(sch.X[0]) == 36

    def test_coverage(self, bias_setup):
        _, _, _, counts = bias_setup
        for seed in range(3):
            for c in (2, 4, 8):
                scan_schedule(beta_schedule(16, c, counts, seed), counts)

    def test_incomplete(self):
        with pytest.raises(ScheduleError):
            beta_assign([frozenset({0, 1})], 3)


class TestNodeCaching:
    def setup_method(self):
        self.n2p = np.repeat(np.arange(16), 10)

    def test_training_partitions_fit(self):
        sch = nc_schedule(self.n2p, np.arange(10), c=4, p=16, seed=0)
        assert len(sch) == 1 and sch.swaps == []
        assert 0 in sch.S[0] and len(sch.S[0]) == 4
        np.testing.assert_array_equal(sch.X[0], np.arange(10))

    def test_fallback_touches_all(self):
        sch = nc_schedule(self.n2p, np.arange(40), c=4, p=16, seed=0)
        assert set().union(*sch.S) == set(range(16))
        assert len(sch.swaps) == 12
        np.testing.assert_array_equal(np.sort(np.concatenate(sch.X)), np.arange(40))

    def test_fallback_swap_count(self):
        n2p = np.repeat(np.arange(8), 5)
        for seed in range(5):
            sch = nc_schedule(n2p, np.arange(40), c=4, p=8, seed=seed)
            assert len(sch.swaps) == 4
            for i, x in enumerate(sch.X):
                assert set(n2p[x].tolist()) <= set(sch.S[i])


class TestBias:
    def test_single_step(self):
        edges = {0: np.array([[0, 0, 1], [1, 0, 2]])}
        assert edge_permutation_bias([[0]], edges, 3).B == 0.0

    def test_split_nodes(self):
        edges = {0: np.array([[0, 0, 0]]), 1: np.array([[1, 0, 1]])}
        rep = edge_permutation_bias([[0], [1]], edges, 2)
        assert rep.B == 1.0 and rep.d == [1.0, 0.0]

    def test_hand_tally(self):
        # node 1 has 2 edges, one per step; node 0 and 2 one edge each
        edges = {0: np.array([[0, 0, 1]]), 1: np.array([[1, 0, 2]])}
        rep = edge_permutation_bias([[0], [1]], edges, 4, keep_tallies=True)
        np.testing.assert_allclose(rep.tallies, [[1.0, 0.5, 0.0], [1.0, 1.0, 1.0]])
        assert rep.B == 1.0

    def test_bounds_and_tallies(self, bias_setup):
        g, _, edges, counts = bias_setup
        rep = edge_permutation_bias(comet(16, 8, 4, 1, counts).X, edges, g.num_nodes, keep_tallies=True)
        assert 0 <= rep.B <= 1
        assert np.all(np.diff(rep.tallies, axis=0) >= -1e-12)
        np.testing.assert_allclose(rep.tallies[-1], 1.0)

    def test_comet_below_beta(self, bias_setup):
        g, _, edges, counts = bias_setup
        bc = np.mean([edge_permutation_bias(comet(16, 8, 4, s, counts).X, edges, g.num_nodes).B for s in range(10)])
        bb = np.mean([edge_permutation_bias(beta_schedule(16, 4, counts, s).X, edges, g.num_nodes).B
                      for s in range(10)])
        assert bc < bb

    def test_comet_more_balanced(self, bias_setup):
        _, _, _, counts = bias_setup

        def cv(sch):
            sizes = np.array([counts[x].sum() for x in sch.X], float)
            return sizes.std() / sizes.mean()

        for seed in range(10):
            assert cv(comet(16, 8, 4, seed, counts)) < cv(beta_schedule(16, 4, counts, seed))


class TestIO:
    def test_single_set(self):
        g = identity_grouping(3)
        r = io_report([frozenset({0, 1, 2})], g, [1, 2, 3], np.ones((3, 3)))
        assert r.total_bytes == 6 + 9 and r.swaps == 0 and r.num_sets == 1

    def test_six_set_sequence(self):
        r = io_report(SIX_SETS, identity_grouping(4), np.ones(4), np.zeros((4, 4)))
        assert r.partition_loads == 7 and r.total_bytes == 7 and r.swaps == 5 and r.num_sets == 6

    def test_new_buckets_only(self):
        r = io_report(SIX_SETS[:2], identity_grouping(4), np.zeros(4), np.ones((4, 4)))
        # {0,1}: 4 buckets; {0,2}: (0,2), (2,0), (2,2)
        assert r.bucket_loads == 7 and r.min_read == 1

    def test_io_falls_with_l(self, bias_setup):
        _, pm, _, counts = bias_setup
        part = node_block_bytes(pm.partition_sizes, 50)
        io = []
        for l in (4, 8, 16):
            vals = [io_report(s.S, s.grouping, part, counts * 12).total_bytes
                    for s in (comet(16, l, 8, seed, counts) for seed in range(10))]
            io.append(np.mean(vals))
        assert io[0] > io[1] > io[2]


class TestAutotune:
    def test_alpha4_example(self):
        plan = autotune(10**6, 10**8, 100, 8, 2e9, 4096, 0)
        assert plan.NO == 4e8 and plan.EO == 8e8
        assert plan.alpha4 == pytest.approx(441.94, abs=0.01)
        assert plan.p == 441
        plan.check()

    def test_small_buffer_example(self):
        # PO = 1 GB at p = 8
        plan = autotune(2 * 10**7, 1000, 100, 8, 4.5e9, 4096, 0.25e9, p=8)
        assert plan.PO == 1e9
        assert (plan.c, plan.l, plan.c_l) == (4, 4, 2)

    def test_in_memory(self):
        plan = autotune(1000, 5000, 16, 12, 1e9, 4096, 0)
        assert plan.in_memory and plan.c == plan.p

    def test_insufficient(self):
        with pytest.raises(TuningError, match="insufficient memory"):
            autotune(10**6, 10**8, 100, 8, 1e6, 4096, 0, p=8)

    def test_bad_inputs(self):
        with pytest.raises(TuningError):
            autotune(0, 10, 4, 8, 1e9, 4096, 0)
        with pytest.raises(TuningError):
            autotune(10, 10, 4, 8, 1e3, 4096, 2e3)

    def test_capacity(self):
        assert max_buffer_capacity(8, 1.0, 0.0, 4.5, 0.25) == 4
        assert max_buffer_capacity(8, 1.0, 0.0, 100, 0) == 8

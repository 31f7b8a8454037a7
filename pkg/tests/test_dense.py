import numpy as np
import pytest

from diskgnn.dense import (
    ALL, ClosureError, DenseSample, SamplerConfig, advance_layer, build_repr_map, check_invariants,
    compute_next_delta, multi_hop_sample, naive_multi_hop_sample, one_hop_sample,
)
from diskgnn.graph_store import RawGraph, ResidencyError

from conftest import A, B, C, D, E, full_subgraph, random_graph


def khop_oracle(g, targets, k, direction="incoming"):
    """Plain set expansion over an adjacency dict."""
    adj = {v: set() for v in range(g.num_nodes)}
    for s, _, d in g.edges:
        if direction in ("incoming", "both"):
            adj[int(d)].add(int(s))
        if direction in ("outgoing", "both"):
            adj[int(s)].add(int(d))
    seen = set(int(t) for t in targets)
    frontier = set(seen)
    for _ in range(k):
        frontier = {u for v in frontier for u in adj[v]} - seen
        seen |= frontier
    return seen


def rebuild_from_groups(d, drop):
    """Fresh DenseSample holding groups ``drop..k`` of ``d``, built with python containers."""
    groups = [d.group(g).tolist() for g in range(d.num_groups)]
    starts, ends = d.segment_bounds()
    lists = {int(o): d.nbrs[s:e].tolist() for o, s, e in zip(d.owners, starts, ends)}
    kept = groups[drop:]
    node_ids = [v for grp in kept for v in grp]
    offsets, acc = [], 0
    for grp in kept:
        offsets.append(acc)
        acc += len(grp)
    owners = [v for grp in kept[1:] for v in grp]
    nbrs, nbr_offsets = [], []
    for v in owners:
        nbr_offsets.append(len(nbrs))
        nbrs.extend(lists[v])
    pos = {v: i for i, v in enumerate(node_ids)}
    return DenseSample(np.array(offsets), np.array(node_ids), np.array(nbr_offsets, np.int64),
                       np.array(nbrs, np.int64).reshape(-1, 2), np.array([pos[n] for n, _ in nbrs], np.int64))


class TestFiveNodeSample:
    def test_groups(self, five_sub):
        d = multi_hop_sample(five_sub, [A, B], SamplerConfig((ALL, ALL)), np.random.default_rng(0))
        assert d.group(2).tolist() == [A, B]
        assert sorted(d.group(1).tolist()) == [C, D]
        assert d.group(0).tolist() == [E]
        np.testing.assert_array_equal(d.node_id_offsets, [0, 1, 3])

    def test_a_neighbors_stored_once(self, five_sub):
        d = multi_hop_sample(five_sub, [A, B], SamplerConfig((ALL, ALL)), np.random.default_rng(0))
        assert list(d.owners).count(A) == 1
        assert sorted(d.neighbors_of(A).tolist()) == [C, D]

    def test_repr_map_positions(self, five_sub):
        d = build_repr_map(multi_hop_sample(five_sub, [A, B], SamplerConfig((ALL, ALL)), np.random.default_rng(0)))
        assert d.node_ids.tolist() == [E, C, D, A, B]
        starts, ends = d.segment_bounds()
        j = list(d.owners).index(A)
        assert d.repr_map[starts[j]:ends[j]].tolist() == [1, 2]
        np.testing.assert_array_equal(d.node_ids[d.repr_map], d.nbrs[:, 0])

    def test_advance_drops_e_and_cd_lists(self, five_sub):
        d = build_repr_map(multi_hop_sample(five_sub, [A, B], SamplerConfig((ALL, ALL)), np.random.default_rng(0)))
        d1 = advance_layer(d)
        assert d1.node_ids.tolist() == [C, D, A, B]
        assert d1.owners.tolist() == [A, B]
        assert sorted(d1.neighbors_of(A).tolist()) == [C, D]
        check_invariants(d1)
        d2 = advance_layer(d1)
        assert d2.node_ids.tolist() == [A, B] and len(d2.nbrs) == 0

    def test_json_roundtrip(self, five_sub):
        d = build_repr_map(multi_hop_sample(five_sub, [A, B], SamplerConfig((ALL, ALL)), np.random.default_rng(0)))
        back = DenseSample.from_json(d.to_json())
        for f in ("node_id_offsets", "node_ids", "nbr_offsets", "nbrs", "repr_map"):
            np.testing.assert_array_equal(getattr(back, f), getattr(d, f))


class TestOneHop:
    def test_isolated_node(self, five_sub):
        nb, off = one_hop_sample(five_sub, [E], 5, "incoming", np.random.default_rng(0))
        assert len(nb) == 0 and off.tolist() == [0]

    def test_short_list_returned_whole(self):
        g = RawGraph(4, 1, np.array([[1, 0, 0], [2, 0, 0], [3, 0, 0]]))
        nb, _ = one_hop_sample(full_subgraph(g), [0], 10, "incoming", np.random.default_rng(0))
        assert sorted(nb[:, 0].tolist()) == [1, 2, 3]

    def test_chain(self):
        g = RawGraph(4, 1, np.array([[0, 0, 1], [1, 0, 2], [2, 0, 3]]))
        nb, _ = one_hop_sample(full_subgraph(g), [3], 1, "incoming", np.random.default_rng(0))
        assert nb[:, 0].tolist() == [2]

    def test_contiguous_offsets(self):
        g = random_graph(30, 200, np.random.default_rng(1))
        sub = full_subgraph(g)
        delta = np.arange(30)
        nb, off = one_hop_sample(sub, delta, 3, "incoming", np.random.default_rng(2))
        ends = np.append(off[1:], len(nb))
        for v, s, e in zip(delta, off, ends):
            got = nb[s:e, 0]
            assert len(got) == min(3, sub.degrees([v])[0])
            assert set(got.tolist()) <= set(sub.in_neighbors(v)[0].tolist())

    def test_uniform_without_replacement(self):
        g = RawGraph(6, 1, np.array([[i, 0, 0] for i in range(1, 6)]))
        sub = full_subgraph(g)
        rng = np.random.default_rng(3)
        hits = np.zeros(6)
        trials = 4000
        for _ in range(trials):
            nb, _ = one_hop_sample(sub, [0], 2, "incoming", rng)
            assert len(set(nb[:, 0].tolist())) == 2
            hits[nb[:, 0]] += 1
        np.testing.assert_allclose(hits[1:] / trials, 0.4, atol=0.03)

    def test_both_marks_inverse_relations(self):
        g = RawGraph(3, 2, np.array([[1, 0, 0], [0, 1, 2]]))
        nb, _ = one_hop_sample(full_subgraph(g), [0], ALL, "both", np.random.default_rng(0))
        assert nb.tolist() == [[1, 0], [2, 1 + 2]]

    def test_non_resident(self, five_sub):
        with pytest.raises(ResidencyError):
            one_hop_sample(five_sub, [9], 2, "incoming", np.random.default_rng(0))


class TestNextDelta:
    def test_five_node_second_hop(self):
        nb = np.array([[E, 0], [A, 0]])
        assert compute_next_delta(nb, np.array([C, D, A, B])).tolist() == [E]

    def test_all_seen(self):
        assert len(compute_next_delta(np.array([[1, 0]]), np.array([1]))) == 0

    def test_first_occurrence_order(self):
        assert compute_next_delta(np.array([5, 7, 5, 9]), np.array([9])).tolist() == [5, 7]


class TestMultiHop:
    def test_k0(self, five_sub):
        d = multi_hop_sample(five_sub, [B, A], SamplerConfig(()))
        assert d.node_ids.tolist() == [B, A] and len(d.nbrs) == 0 and d.k == 0

    def test_duplicate_targets(self, five_sub):
        with pytest.raises(ValueError):
            multi_hop_sample(five_sub, [A, A], SamplerConfig((1,)))

    def test_non_resident_target(self, five_sub):
        with pytest.raises(ResidencyError):
            multi_hop_sample(five_sub, [7], SamplerConfig((1,)))

    @pytest.mark.parametrize("direction", ["incoming", "outgoing", "both"])
    def test_unlimited_matches_oracle(self, direction):
        rng = np.random.default_rng(4)
        for _ in range(10):
            g = random_graph(6, 8, rng)
            sub = full_subgraph(g)
            targets = rng.choice(6, 2, replace=False)
            for k in (1, 2, 3):
                d = multi_hop_sample(sub, targets, SamplerConfig((ALL,) * k, direction), rng)
                assert set(d.node_ids.tolist()) == khop_oracle(g, targets, k, direction)
                check_invariants(build_repr_map(d))

    def test_effective_fanout_rule(self):
        rng = np.random.default_rng(5)
        g = random_graph(200, 3000, rng)
        sub = full_subgraph(g)
        fanouts = (2, 5, 9)
        d = multi_hop_sample(sub, rng.choice(200, 20, replace=False), SamplerConfig(fanouts), rng)
        starts, ends = d.segment_bounds()
        owner_group = np.concatenate([np.full(len(d.group(gi)), gi) for gi in range(1, d.k + 1)])
        for gi, s, e in zip(owner_group, starts, ends):
            assert e - s <= fanouts[d.k - gi]
        assert len(set(d.owners.tolist())) == len(d.owners)

    def test_deterministic(self):
        g = random_graph(100, 800, np.random.default_rng(6))
        sub = full_subgraph(g)
        cfg = SamplerConfig((3, 3), "both")
        a = multi_hop_sample(sub, np.arange(10), cfg, np.random.default_rng(11))
        b = multi_hop_sample(sub, np.arange(10), cfg, np.random.default_rng(11))
        assert a.to_json() == b.to_json()

    def test_fewer_nodes_than_resampling(self):
        rng = np.random.default_rng(7)
        g = random_graph(2000, 20000, rng)
        sub = full_subgraph(g)
        targets = rng.choice(2000, 50, replace=False)
        cfg = SamplerConfig((5, 5, 5))
        dense = multi_hop_sample(sub, targets, cfg, np.random.default_rng(1))
        naive = naive_multi_hop_sample(sub, targets, cfg, np.random.default_rng(1))
        assert len(dense.node_ids) <= naive["nodes"]


class TestReprMapAndAdvance:
    def test_empty(self):
        d = DenseSample(np.array([0]), np.array([3]), np.empty(0, np.int64), np.empty((0, 2), np.int64))
        assert len(build_repr_map(d).repr_map) == 0

    def test_closure_violation(self):
        d = DenseSample(np.array([0, 1]), np.array([1, 2]), np.array([0]), np.array([[5, 0]]))
        with pytest.raises(ClosureError):
            build_repr_map(d)

    def test_advance_single_group(self):
        d = DenseSample(np.array([0]), np.array([3]), np.empty(0, np.int64), np.empty((0, 2), np.int64))
        with pytest.raises(ValueError):
            advance_layer(d)

    def test_k1_advance(self):
        g = random_graph(20, 60, np.random.default_rng(8))
        d = build_repr_map(multi_hop_sample(full_subgraph(g), [0, 1, 2], SamplerConfig((3,)), np.random.default_rng(0)))
        d1 = advance_layer(d)
        assert d1.node_ids.tolist() == [0, 1, 2] and len(d1.nbrs) == 0

    def test_advance_matches_rebuild(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            g = random_graph(60, 300, rng)
            d = build_repr_map(multi_hop_sample(full_subgraph(g), rng.choice(60, 5, replace=False),
                                                SamplerConfig((3, 3, 3)), rng))
            cur = d
            for step in (1, 2):
                cur = advance_layer(cur)
                ref = rebuild_from_groups(d, step)
                for f in ("node_id_offsets", "node_ids", "nbr_offsets", "nbrs", "repr_map"):
                    np.testing.assert_array_equal(getattr(cur, f), getattr(ref, f), err_msg=f)
                check_invariants(cur)
            cur = advance_layer(cur)
            np.testing.assert_array_equal(cur.node_ids, d.targets)

import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from kgalign.graph import SeedAlignment, build_graph
from kgalign.partition import (
    CpsConfig,
    MiniBatch,
    OverlapConfig,
    PartitionError,
    cut_weight,
    edge_cut_rate,
    expand_overlap,
    metis_cps,
    part_capacity,
    partition_kway,
    seed_colocation_rate,
    vps,
)
from kgalign.partition.batches import (
    assignment_of,
    batch_similarity,
    pair_parts,
    read_assignment,
    reweight_target,
    write_assignment,
)
from kgalign.partition.kway import kway_csr


def graph_from_edges(edges, labels=None):
    labels = labels or {}
    name = lambda v: labels.get(v, f"v{v}")  # noqa: E731
    return build_graph([(name(u), "r", name(v)) for u, v in edges])


def csr(n, edges, weights):
    u, v = np.asarray(edges).T
    m = sp.coo_matrix((np.r_[weights, weights], (np.r_[u, v], np.r_[v, u])), shape=(n, n)).tocsr()
    m.sort_indices()
    return m.indptr, m.indices, m.data


def community_graph(n, k, p_in, p_out, seed):
    rng = np.random.default_rng(seed)
    comm = rng.integers(k, size=n)
    edges = [(i, i + 1) for i in range(n - 1)]  # keeps every vertex in the graph
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < (p_in if comm[i] == comm[j] else p_out):
                edges.append((i, j))
    return graph_from_edges(edges)


def enumerate_balanced_cuts(n, cap, weight_of):
    """Every 2-partition with both sides <= cap, as (cut, assignment)."""
    out = []
    for bits in itertools.product((0, 1), repeat=n):
        a = np.asarray(bits)
        if a[0] == 1:  # symmetry
            continue
        if a.sum() > cap or (n - a.sum()) > cap:
            continue
        out.append((weight_of(a), a))
    return out


# ------------------------------------------------------------ partition_kway


def test_path_of_four_splits_in_the_middle():
    g = graph_from_edges([(0, 1), (1, 2), (2, 3)])
    p = partition_kway(g, 2)
    ids = [g.entities.id(f"v{i}") for i in range(4)]
    a = p.assignment[ids]
    assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]
    assert cut_weight(g, p.assignment) == 1.0
    assert edge_cut_rate(g, p) == pytest.approx(1 / 3)


def test_two_triangles_cut_only_the_bridge():
    edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]
    g = graph_from_edges(edges)
    p = partition_kway(g, 2)
    cap = part_capacity(6, 2, 0.1)
    oracle = min(c for c, _ in enumerate_balanced_cuts(6, cap, lambda a: cut_weight(g, a)))
    assert oracle == 1.0
    assert cut_weight(g, p.assignment) == oracle


def test_zero_weight_bridge_between_cliques():
    clique = lambda off: [(off + i, off + j) for i in range(4) for j in range(i + 1, 4)]  # noqa: E731
    edges = clique(0) + clique(4) + [(3, 4)]
    weights = [1.0] * 12 + [0.0]
    indptr, indices, data = csr(8, edges, weights)
    part = kway_csr(indptr, indices, data, 2)

    def cut(a):
        return sum(w for (u, v), w in zip(edges, weights) if a[u] != a[v])

    oracle = min(c for c, _ in enumerate_balanced_cuts(8, part_capacity(8, 2, 0.1), cut))
    assert oracle == 0.0 and cut(part) == 0.0


def test_k_one_and_invalid_k():
    g = graph_from_edges([(0, 1), (1, 2)])
    assert partition_kway(g, 1).assignment.tolist() == [0, 0, 0]
    assert edge_cut_rate(g, partition_kway(g, 1)) == 0.0
    with pytest.raises(PartitionError):
        partition_kway(g, 0)
    with pytest.raises(PartitionError):
        partition_kway(g, 4)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(10, 150),
    K=st.integers(2, 8),
    imbalance=st.sampled_from([0.0, 0.05, 0.1, 0.3]),
    seed=st.integers(0, 1000),
)
def test_balance_and_coverage(n, K, imbalance, seed):
    g = community_graph(n, 3, 0.3, 0.02, seed)
    p = partition_kway(g, K, imbalance, rng_seed=seed)
    assert len(p.assignment) == g.num_entities
    assert p.assignment.min() >= 0 and p.assignment.max() < K
    assert p.sizes().max() <= part_capacity(g.num_entities, K, imbalance)
    assert p.is_balanced()


def test_deterministic_under_fixed_seed():
    g = community_graph(300, 4, 0.1, 0.01, 1)
    a = partition_kway(g, 4, rng_seed=7).assignment
    b = partition_kway(g, 4, rng_seed=7).assignment
    assert np.array_equal(a, b)


def test_ncuts_never_worsens_the_cut():
    g = community_graph(400, 5, 0.08, 0.01, 2)
    one = kway_csr(g.indptr, g.indices, g.weights, 5, rng_seed=3, ncuts=1)
    four = kway_csr(g.indptr, g.indices, g.weights, 5, rng_seed=3, ncuts=4)
    assert cut_weight(g, four) <= cut_weight(g, one)


def test_edge_cut_rate_matches_recount():
    rng = np.random.default_rng(5)
    g = community_graph(120, 4, 0.1, 0.02, 5)
    assign = rng.integers(3, size=g.num_entities)
    adj = g.adjacency().toarray() > 0
    iu = np.triu_indices(g.num_entities, 1)
    split = assign[iu[0]] != assign[iu[1]]
    assert edge_cut_rate(g, assign) == pytest.approx(np.count_nonzero(adj[iu] & split) / np.count_nonzero(adj[iu]))


# --------------------------------------------------------------------- vps


def seeded_pair(n=30, seeds=10):
    g_s = graph_from_edges([(i, i + 1) for i in range(n - 1)])
    g_t = graph_from_edges([(i, (i + 3) % n) for i in range(n)])
    pairs = [(g_s.entities.id(f"v{i}"), g_t.entities.id(f"v{i}")) for i in range(seeds)]
    return g_s, g_t, SeedAlignment(pairs)


@pytest.mark.parametrize("n_seeds,expected", [(10, [2, 2, 2, 2, 2]), (11, [3, 2, 2, 2, 2])])
def test_vps_spreads_seeds_evenly(n_seeds, expected):
    g_s, g_t, seeds = seeded_pair(seeds=n_seeds)
    batches = vps(g_s, g_t, seeds, 5, rng_seed=1)
    assert sorted((len(b.local_seeds) for b in batches), reverse=True) == expected
    assert seed_colocation_rate(batches, seeds) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_vps_batches_are_disjoint_covers(seed, K):
    g_s, g_t, seeds = seeded_pair(40, 13)
    batches = vps(g_s, g_t, seeds, K, rng_seed=seed)
    src = np.concatenate([b.source_entities for b in batches])
    tgt = np.concatenate([b.target_entities for b in batches])
    assert sorted(src.tolist()) == list(range(g_s.num_entities))
    assert sorted(tgt.tolist()) == list(range(g_t.num_entities))
    assert seed_colocation_rate(batches, seeds) == 1.0
    for b in batches:
        assert np.isin(b.local_seeds.sources, b.source_entities).all()
        assert np.isin(b.local_seeds.targets, b.target_entities).all()


# --------------------------------------------------------------- metis-cps


def test_metis_cps_with_one_batch_keeps_everything():
    g_s, g_t, seeds = seeded_pair()
    (batch,) = metis_cps(g_s, g_t, seeds, CpsConfig(K=1))
    assert len(batch.source_entities) == g_s.num_entities
    assert len(batch.target_entities) == g_t.num_entities
    assert seed_colocation_rate([batch], seeds) == 1.0


def two_community_instance():
    """Source: two 4-cliques joined by one edge, 3 seeds in each. Target:
    the seed images are wired across the communities so that an unweighted
    split would mix them."""
    src_edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    src_edges += [(4 + i, 4 + j) for i in range(4) for j in range(i + 1, 4)] + [(3, 4)]
    g_s = graph_from_edges(src_edges, {i: f"s{i}" for i in range(8)})
    # targets x0..x2 mirror s0..s2, y0..y2 mirror s4..s6; t6, t7 unseeded
    names = ["x0", "x1", "x2", "y0", "y1", "y2", "t6", "t7"]
    tgt_edges = [(0, 3), (1, 4), (2, 5), (0, 4), (1, 5), (3, 6), (4, 7), (0, 6), (5, 7), (6, 7), (2, 3)]
    g_t = graph_from_edges(tgt_edges, dict(enumerate(names)))
    pairs = [(g_s.entities.id(f"s{i}"), g_t.entities.id(f"x{i}")) for i in range(3)]
    pairs += [(g_s.entities.id(f"s{4 + i}"), g_t.entities.id(f"y{i}")) for i in range(3)]
    return g_s, g_t, SeedAlignment(pairs)


def test_seed_groups_stay_together_in_the_target():
    g_s, g_t, seeds = two_community_instance()
    cfg = CpsConfig(K=2)
    for rng_seed in range(5):
        batches = metis_cps(g_s, g_t, seeds, cfg, rng_seed)
        _, tgt_of = assignment_of(batches, g_s.num_entities, g_t.num_entities)
        xs = {tgt_of[g_t.entities.id(f"x{i}")] for i in range(3)}
        ys = {tgt_of[g_t.entities.id(f"y{i}")] for i in range(3)}
        assert len(xs) == 1 and len(ys) == 1 and xs != ys
        assert seed_colocation_rate(batches, seeds) == 1.0


def test_reweighted_target_optimum_keeps_groups_together():
    g_s, g_t, seeds = two_community_instance()
    cfg = CpsConfig(K=2)
    src_part = partition_kway(g_s, 2, rng_seed=0).assignment
    indptr, indices, weights = reweight_target(g_t, seeds, src_part, cfg, np.random.default_rng(0))
    n = g_t.num_entities
    rows = np.repeat(np.arange(n), np.diff(indptr))

    def cut(a):
        return weights[a[rows] != a[indices]].sum() / 2

    cuts = enumerate_balanced_cuts(n, part_capacity(n, 2, 0.1), cut)
    best = min(c for c, _ in cuts)
    group = np.full(n, -1)
    group[seeds.targets] = src_part[seeds.sources]
    for c, a in cuts:
        if c == best:
            for i in (0, 1):
                assert len(set(a[group == i])) == 1
    part = kway_csr(indptr, indices, weights, 2)
    assert cut(part) == best


def test_zero_weight_edges_never_count():
    g_s, g_t, seeds = two_community_instance()
    src_part = partition_kway(g_s, 2, rng_seed=0).assignment
    indptr, indices, weights = reweight_target(g_t, seeds, src_part, CpsConfig(K=2), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    n = g_t.num_entities
    rows = np.repeat(np.arange(n), np.diff(indptr))
    nz = weights != 0
    assert (~nz).any()
    for _ in range(20):
        a = rng.integers(2, size=n)
        crossing = a[rows] != a[indices]
        assert weights[crossing].sum() == weights[crossing & nz].sum()


def test_reweighting_is_symmetric_and_cross_group_edges_vanish():
    g_s, g_t, seeds = two_community_instance()
    src_part = partition_kway(g_s, 2, rng_seed=0).assignment
    indptr, indices, weights = reweight_target(g_t, seeds, src_part, CpsConfig(K=2), np.random.default_rng(0))
    m = sp.csr_matrix((weights, indices, indptr)).toarray()
    assert np.array_equal(m, m.T)
    x0, y0 = g_t.entities.id("x0"), g_t.entities.id("y0")
    assert m[x0, y0] == 0.0  # real edge joining the two groups
    x1 = g_t.entities.id("x1")
    assert m[x0, x1] == 1000.0 or m[x0, g_t.entities.id("x2")] == 1000.0


def test_metis_cps_is_deterministic_and_disjoint():
    g_s, g_t, seeds = two_community_instance()
    a = metis_cps(g_s, g_t, seeds, CpsConfig(K=2), 11)
    b = metis_cps(g_s, g_t, seeds, CpsConfig(K=2), 11)
    for x, y in zip(a, b):
        assert np.array_equal(x.source_entities, y.source_entities)
        assert np.array_equal(x.target_entities, y.target_entities)
    assert sorted(np.concatenate([x.source_entities for x in a]).tolist()) == list(range(g_s.num_entities))
    assert sorted(np.concatenate([x.target_entities for x in a]).tolist()) == list(range(g_t.num_entities))


def test_metis_cps_without_seeds_still_partitions(caplog):
    g_s, g_t, _ = two_community_instance()
    batches = metis_cps(g_s, g_t, SeedAlignment(), CpsConfig(K=2))
    assert len(batches) == 2
    assert "no seeds" in caplog.text


def test_pair_parts_greedy():
    counts = np.array([[5, 9, 0], [8, 1, 0], [0, 0, 3]])
    assert pair_parts(counts) == [(0, 1), (1, 0), (2, 2)]


def test_cps_config_validation():
    with pytest.raises(ValueError):
        CpsConfig(q=0)
    with pytest.raises(ValueError):
        CpsConfig(w_prime=1.0)


# ---------------------------------------------------------------- overlap


def manual_batches():
    """Three batches of 4+4 entities; seeds engineered so that batch 0
    shares 3 pairs with batch 2 and 1 with batch 1."""
    src = [np.arange(0, 4), np.arange(4, 8), np.arange(8, 12)]
    tgt = [np.arange(0, 4), np.arange(4, 8), np.arange(8, 12)]
    pairs = [(0, 8), (1, 9), (2, 10), (3, 4), (5, 5), (6, 1), (9, 6), (10, 7)]
    seeds = SeedAlignment(pairs)
    batches = [MiniBatch(i, s, t, SeedAlignment()) for i, (s, t) in enumerate(zip(src, tgt))]
    return batches, seeds


def test_overlap_identity_at_one():
    batches, seeds = manual_batches()
    assert expand_overlap(batches, seeds, OverlapConfig(1)) is batches


def test_overlap_full_union_at_k():
    batches, seeds = manual_batches()
    for b in expand_overlap(batches, seeds, OverlapConfig(3)):
        assert b.source_entities.tolist() == list(range(12))
        assert b.target_entities.tolist() == list(range(12))
        assert len(b.local_seeds) == len(seeds)


def test_overlap_merges_most_similar_batch():
    batches, seeds = manual_batches()
    sim = batch_similarity(batches, seeds, 12, 12)
    brute = np.zeros((3, 3), dtype=int)
    for s, t in seeds:
        brute[s // 4, t // 4] += 1
    assert np.array_equal(sim, brute)
    expanded = expand_overlap(batches, seeds, OverlapConfig(2))
    for a, b in enumerate(expanded):
        others = [x for x in range(3) if x != a]
        partner = max(others, key=lambda x: (sim[a, x], -x))
        assert set(b.source_entities.tolist()) == set(range(4 * a, 4 * a + 4)) | set(range(4 * partner, 4 * partner + 4))
        assert b.scored_sources.tolist() == list(range(4 * a, 4 * a + 4))


def test_overlap_range_checked():
    batches, seeds = manual_batches()
    with pytest.raises(ValueError, match="d_ov"):
        expand_overlap(batches, seeds, OverlapConfig(4))


def test_colocation_fixture():
    batches, _ = manual_batches()
    # 4 of 10 pairs land in one batch
    pairs = [(0, 1), (5, 6), (9, 10), (11, 8), (1, 4), (2, 9), (6, 0), (7, 11), (10, 2), (3, 5)]
    assert seed_colocation_rate(batches, SeedAlignment(pairs)) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        seed_colocation_rate(batches, SeedAlignment())


def test_assignment_file_round_trip(tmp_path):
    g_s, g_t, seeds = two_community_instance()
    batches = metis_cps(g_s, g_t, seeds, CpsConfig(K=2), 0)
    path = tmp_path / "batches.tsv"
    write_assignment(path, batches, g_s, g_t)
    first = path.read_text().splitlines()[0].split("\t")
    assert first[1] in ("S", "T") and first[2].isdigit()
    back = read_assignment(path, g_s, g_t, seeds)
    for x, y in zip(batches, back):
        assert x.index == y.index
        assert np.array_equal(x.source_entities, y.source_entities)
        assert np.array_equal(x.target_entities, y.target_entities)
        assert list(x.local_seeds) == list(y.local_seeds)

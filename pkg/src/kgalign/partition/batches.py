"""Seed-aware mini-batch generation (random and collaborative), overlap
expansion and co-location metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..graph import KnowledgeGraph, SeedAlignment, SeedKind
from .kway import kway_csr, part_capacity, partition_kway

log = logging.getLogger(__name__)
# independent multilevel runs on the re-weighted target graph; a split
# seed group costs w_prime per stranded member, so the best cut wins
TARGET_NCUTS = 4


@dataclass
class MiniBatch:
    """A paired source/target subgraph with the seeds inside it.

    Entity arrays hold global ids, sorted. ``core_sources`` is the batch's
    own source set before overlap expansion (None when never expanded).
    """

    index: int
    source_entities: np.ndarray
    target_entities: np.ndarray
    local_seeds: SeedAlignment
    core_sources: np.ndarray | None = None

    @property
    def scored_sources(self) -> np.ndarray:
        return self.source_entities if self.core_sources is None else self.core_sources

    def source_edges(self, g: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
        return induced_edges(g, self.source_entities)

    def target_edges(self, g: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
        return induced_edges(g, self.target_entities)


def induced_edges(g: KnowledgeGraph, entities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges (u < v, global ids) of the induced subgraph."""
    u, v, _ = g.edge_list()
    inside = np.zeros(g.num_entities, dtype=bool)
    inside[entities] = True
    keep = inside[u] & inside[v]
    return u[keep], v[keep]


@dataclass
class CpsConfig:
    K: int = 5
    w_prime: float = 1000.0
    q: int = 1
    imbalance: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.w_prime <= 1:
            raise ValueError("w_prime must exceed 1")


@dataclass
class OverlapConfig:
    d_ov: int = 1


def _local_seeds(seeds: SeedAlignment, src_mask: np.ndarray, tgt_mask: np.ndarray) -> SeedAlignment:
    if len(seeds) == 0:
        return SeedAlignment(kind=seeds.kind)
    keep = src_mask[seeds.sources] & tgt_mask[seeds.targets]
    return SeedAlignment(seeds.pairs[keep], seeds.kind)


def batches_from_assignment(
    g_s: KnowledgeGraph,
    g_t: KnowledgeGraph,
    seeds: SeedAlignment,
    src_part: np.ndarray,
    tgt_part: np.ndarray,
    K: int,
) -> list[MiniBatch]:
    out = []
    for i in range(K):
        src_mask = src_part == i
        tgt_mask = tgt_part == i
        out.append(
            MiniBatch(
                i,
                np.flatnonzero(src_mask),
                np.flatnonzero(tgt_mask),
                _local_seeds(seeds, src_mask, tgt_mask),
            )
        )
    return out


def assignment_of(batches: list[MiniBatch], n_source: int, n_target: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-entity batch index (disjoint batches only; -1 = unassigned)."""
    src = np.full(n_source, -1, dtype=np.int64)
    tgt = np.full(n_target, -1, dtype=np.int64)
    for b in batches:
        src[b.source_entities] = b.index
        tgt[b.target_entities] = b.index
    return src, tgt


def vps(
    g_s: KnowledgeGraph,
    g_t: KnowledgeGraph,
    seeds: SeedAlignment,
    K: int,
    rng_seed: int = 0,
) -> list[MiniBatch]:
    """Seeds dealt round-robin, every other entity placed uniformly at random."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(rng_seed)
    src_part = rng.integers(0, K, size=g_s.num_entities)
    tgt_part = rng.integers(0, K, size=g_t.num_entities)
    if len(seeds):
        order = rng.permutation(len(seeds))
        slot = np.empty(len(seeds), dtype=np.int64)
        slot[order] = np.arange(len(seeds)) % K
        src_part[seeds.sources] = slot
        tgt_part[seeds.targets] = slot
    return batches_from_assignment(g_s, g_t, seeds, src_part, tgt_part, K)


def reweight_target(
    g_t: KnowledgeGraph,
    seeds: SeedAlignment,
    src_part: np.ndarray,
    cfg: CpsConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Target adjacency re-weighted for collaborative partitioning.

    Edges inside one seed group (targets whose counterparts share a source
    part) and hub-star virtual edges get ``w_prime``; edges joining two
    different seed groups get zero weight. Returns a symmetric CSR triple.
    """
    n = g_t.num_entities
    group = np.full(n, -1, dtype=np.int64)
    group[seeds.targets] = src_part[seeds.sources]

    u, v, w = g_t.edge_list()
    w = w.copy()
    gu, gv = group[u], group[v]
    both = (gu >= 0) & (gv >= 0)
    w[both & (gu == gv)] = cfg.w_prime
    w[both & (gu != gv)] = 0.0

    cap = part_capacity(n, cfg.K, cfg.imbalance)
    hub_u, hub_v = [], []
    for i in range(cfg.K):
        members = np.flatnonzero(group == i)
        if len(members) < 2:
            continue
        if len(members) > cap:
            log.warning(
                "seed group %d has %d targets but parts hold %d; balance wins", i, len(members), cap
            )
        hubs = rng.choice(members, size=min(cfg.q, len(members)), replace=False)
        for h in hubs:
            others = members[members != h]
            hub_u.append(np.minimum(others, h))
            hub_v.append(np.maximum(others, h))
    if hub_u:
        hu, hv = np.concatenate(hub_u), np.concatenate(hub_v)
        u = np.concatenate([u, hu])
        v = np.concatenate([v, hv])
        w = np.concatenate([w, np.full(len(hu), cfg.w_prime)])
    # existing edge + virtual edge on the same pair -> w_prime
    key = u * n + v
    order = np.lexsort((w, key))
    key, u, v, w = key[order], u[order], v[order], w[order]
    last = np.r_[key[1:] != key[:-1], True]
    u, v, w = u[last], v[last], w[last]

    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    vals = np.concatenate([w, w])
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, cols, vals


def pair_parts(counts: np.ndarray) -> list[tuple[int, int]]:
    """Greedy max-overlap pairing of source parts to target parts; ties go
    to the lower source part, then the lower target part."""
    K = counts.shape[0]
    free_s, free_t = set(range(K)), set(range(K))
    pairs = []
    flat = sorted(
        ((-int(counts[i, j]), i, j) for i in range(K) for j in range(K))
    )
    for _, i, j in flat:
        if i in free_s and j in free_t:
            pairs.append((i, j))
            free_s.discard(i)
            free_t.discard(j)
    return sorted(pairs)


def metis_cps(
    g_s: KnowledgeGraph,
    g_t: KnowledgeGraph,
    seeds: SeedAlignment,
    cfg: CpsConfig,
    rng_seed: int = 0,
) -> list[MiniBatch]:
    """Collaborative partitioning: partition the source graph, re-weight
    the target graph around the seed groups, partition it, then pair up
    the parts sharing the most seeds."""
    K = cfg.K
    rng = np.random.default_rng(rng_seed)
    src_seed, tgt_seed = (int(x) for x in rng.integers(0, 2**31 - 1, size=2))
    part_s = partition_kway(g_s, K, cfg.imbalance, src_seed).assignment
    if len(seeds) == 0:
        log.warning("no seeds; partitioning both graphs independently")
        part_t = partition_kway(g_t, K, cfg.imbalance, tgt_seed).assignment
        return batches_from_assignment(g_s, g_t, seeds, part_s, part_t, K)

    indptr, indices, weights = reweight_target(g_t, seeds, part_s, cfg, rng)
    part_t = kway_csr(indptr, indices, weights, K, cfg.imbalance, tgt_seed, ncuts=TARGET_NCUTS)

    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (part_s[seeds.sources], part_t[seeds.targets]), 1)
    relabel = np.empty(K, dtype=np.int64)
    for i, j in pair_parts(counts):
        relabel[j] = i
    return batches_from_assignment(g_s, g_t, seeds, part_s, relabel[part_t], K)


def batch_similarity(batches: list[MiniBatch], seeds: SeedAlignment, n_source: int, n_target: int) -> np.ndarray:
    """sim[a, b] = seed pairs with the source in batch a, target in batch b."""
    K = len(batches)
    src_of, tgt_of = assignment_of(batches, n_source, n_target)
    sim = np.zeros((K, K), dtype=np.int64)
    if len(seeds):
        a, b = src_of[seeds.sources], tgt_of[seeds.targets]
        ok = (a >= 0) & (b >= 0)
        np.add.at(sim, (a[ok], b[ok]), 1)
    return sim


def expand_overlap(
    batches: list[MiniBatch],
    seeds: SeedAlignment,
    cfg: OverlapConfig,
    n_source: int | None = None,
    n_target: int | None = None,
) -> list[MiniBatch]:
    """Merge each batch with its ``d_ov - 1`` most seed-similar batches."""
    K = len(batches)
    if not 1 <= cfg.d_ov <= K:
        raise ValueError(f"d_ov must lie in [1, {K}], got {cfg.d_ov}")
    if cfg.d_ov == 1:
        return batches
    if n_source is None:
        n_source = 1 + max(int(b.source_entities.max(initial=-1)) for b in batches)
    if n_target is None:
        n_target = 1 + max(int(b.target_entities.max(initial=-1)) for b in batches)
    sim = batch_similarity(batches, seeds, n_source, n_target)
    out = []
    for a in range(K):
        others = [b for b in range(K) if b != a]
        others.sort(key=lambda b: (-sim[a, b], b))
        chosen = [a] + others[: cfg.d_ov - 1]
        src = np.unique(np.concatenate([batches[b].source_entities for b in chosen]))
        tgt = np.unique(np.concatenate([batches[b].target_entities for b in chosen]))
        src_mask = np.zeros(n_source, dtype=bool)
        tgt_mask = np.zeros(n_target, dtype=bool)
        src_mask[src] = True
        tgt_mask[tgt] = True
        out.append(
            MiniBatch(
                batches[a].index,
                src,
                tgt,
                _local_seeds(seeds, src_mask, tgt_mask),
                core_sources=batches[a].scored_sources,
            )
        )
    return out


def seed_colocation_rate(batches: list[MiniBatch], truth: SeedAlignment) -> float:
    """Fraction of pairs whose two endpoints share at least one batch."""
    if len(truth) == 0:
        raise ValueError("no pairs")
    together = np.zeros(len(truth), dtype=bool)
    for b in batches:
        together |= np.isin(truth.sources, b.source_entities) & np.isin(truth.targets, b.target_entities)
    return float(together.mean())


def write_assignment(path, batches: list[MiniBatch], g_s: KnowledgeGraph, g_t: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in batches:
            for e in b.source_entities.tolist():
                fh.write(f"{g_s.entities.label(e)}\tS\t{b.index}\n")
        for b in batches:
            for e in b.target_entities.tolist():
                fh.write(f"{g_t.entities.label(e)}\tT\t{b.index}\n")


def read_assignment(
    path, g_s: KnowledgeGraph, g_t: KnowledgeGraph, seeds: SeedAlignment | None = None
) -> list[MiniBatch]:
    src: dict[int, list[int]] = {}
    tgt: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            label, side, idx = line.split("\t")
            if side == "S":
                src.setdefault(int(idx), []).append(g_s.entities.id(label))
            elif side == "T":
                tgt.setdefault(int(idx), []).append(g_t.entities.id(label))
            else:
                raise ValueError(f"bad side {side!r} in {path}")
    seeds = seeds if seeds is not None else SeedAlignment(kind=SeedKind.TRAIN)
    out = []
    for i in sorted(set(src) | set(tgt)):
        s = np.unique(np.asarray(src.get(i, []), dtype=np.int64))
        t = np.unique(np.asarray(tgt.get(i, []), dtype=np.int64))
        s_mask = np.zeros(g_s.num_entities, dtype=bool)
        t_mask = np.zeros(g_t.num_entities, dtype=bool)
        s_mask[s] = True
        t_mask[t] = True
        out.append(MiniBatch(i, s, t, _local_seeds(seeds, s_mask, t_mask)))
    return out

"""Synthetic bilingual KG benchmark with a planted alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import KnowledgeGraph, SeedAlignment, SeedKind, build_graph

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"
INTRA_COMMUNITY_PROB = 0.9
RELATION_VOCAB = 24


@dataclass
class SyntheticSpec:
    entities_per_side: int = 1000
    avg_degree: float = 8.0
    community_count: int = 10
    name_noise: float = 0.0
    structure_noise: float = 0.0
    unknown_entity_ratio: float = 0.0
    min_anchor: int = 5
    rng_seed: int = 0

    def validate(self) -> None:
        n = self.entities_per_side
        if n < 2:
            raise ValueError("need at least 2 entities per side")
        if not 0 < self.avg_degree <= n - 1:
            raise ValueError(f"avg_degree must lie in (0, {n - 1}]")
        if not 1 <= self.community_count <= n:
            raise ValueError("community_count must lie in [1, entities_per_side]")
        if n // self.community_count < 2:
            raise ValueError("communities need at least 2 members each")
        for name in ("name_noise", "structure_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.unknown_entity_ratio < 0:
            raise ValueError("unknown_entity_ratio must be >= 0")
        if self.min_anchor < 1:
            raise ValueError("min_anchor must be >= 1")


@dataclass
class Benchmark:
    source: KnowledgeGraph
    target: KnowledgeGraph
    truth: SeedAlignment
    perturbed: np.ndarray  # planted entity index -> name was edited


def _vocabulary(size: int, rng: np.random.Generator) -> list[str]:
    words: set[str] = set()
    while len(words) < size:
        syllables = rng.integers(2, 4)
        words.add(
            "".join(
                _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                for _ in range(syllables)
            )
        )
    return sorted(words)


def _fresh_names(count: int, vocab: list[str], taken: set[str], rng: np.random.Generator) -> list[str]:
    out = []
    while len(out) < count:
        n_tokens = int(rng.integers(2, 4))
        name = " ".join(vocab[i] for i in rng.integers(len(vocab), size=n_tokens))
        if name not in taken:
            taken.add(name)
            out.append(name)
    return out


def perturb_name(name: str, rng: np.random.Generator) -> str:
    """1 to 3 random character edits (substitute, insert, delete)."""
    chars = list(name)
    letters = _CONSONANTS + _VOWELS
    for _ in range(int(rng.integers(1, 4))):
        pos = [i for i, c in enumerate(chars) if c != " "]
        op = int(rng.integers(3))
        i = pos[int(rng.integers(len(pos)))]
        if op == 0:
            chars[i] = letters[rng.integers(len(letters))]
        elif op == 1:
            chars.insert(i, letters[rng.integers(len(letters))])
        elif len(pos) > 1:
            del chars[i]
    return "".join(chars)


def _community_edges(spec: SyntheticSpec, rng: np.random.Generator):
    n, c = spec.entities_per_side, spec.community_count
    community = np.arange(n) % c
    rng.shuffle(community)
    members = [np.flatnonzero(community == k) for k in range(c)]
    n_edges = int(round(n * spec.avg_degree / 2))
    edges: set[tuple[int, int]] = set()
    backbone = []
    for i in range(n):
        pool = members[community[i]]
        j = i
        while j == i:
            j = int(pool[rng.integers(len(pool))])
        e = (min(i, j), max(i, j))
        if e not in edges:
            edges.add(e)
            backbone.append(e)
    extra = []
    attempts = 0
    while len(edges) < n_edges and attempts < 50 * n_edges:
        attempts += 1
        i = int(rng.integers(n))
        if rng.random() < INTRA_COMMUNITY_PROB:
            pool = members[community[i]]
            j = int(pool[rng.integers(len(pool))])
        else:
            j = int(rng.integers(n))
        if i == j:
            continue
        e = (min(i, j), max(i, j))
        if e not in edges:
            edges.add(e)
            extra.append(e)
    return backbone, extra


def generate_synthetic_benchmark(spec: SyntheticSpec) -> Benchmark:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    n = spec.entities_per_side
    vocab = _vocabulary(max(60, n // 8), rng)
    taken: set[str] = set()
    src_names = _fresh_names(n, vocab, taken, rng)

    tgt_names = list(src_names)
    perturbed = np.zeros(n, dtype=bool)
    for i in rng.permutation(n)[: int(round(spec.name_noise * n))].tolist():
        for _ in range(100):
            cand = perturb_name(src_names[i], rng)
            if cand != src_names[i] and cand not in taken:
                taken.add(cand)
                tgt_names[i] = cand
                perturbed[i] = True
                break

    backbone, extra = _community_edges(spec, rng)
    rels = [f"rel{r}" for r in range(RELATION_VOCAB)]
    all_edges = backbone + extra
    edge_rel = rng.integers(RELATION_VOCAB, size=len(all_edges))
    flip = rng.random(len(all_edges)) < 0.5

    src_edges = [(b, a) if f else (a, b) for (a, b), f in zip(all_edges, flip)]
    src_triples = [(src_names[h], rels[r], src_names[t]) for (h, t), r in zip(src_edges, edge_rel)]

    # target: rewire a fraction of the non-backbone edges
    tgt_edges = list(src_edges)
    n_rewire = min(len(extra), int(round(spec.structure_noise * len(all_edges))))
    existing = {(min(a, b), max(a, b)) for a, b in tgt_edges}
    for k in (len(backbone) + rng.permutation(len(extra))[:n_rewire]).tolist():
        h, _ = tgt_edges[k]
        for _ in range(100):
            t = int(rng.integers(n))
            key = (min(h, t), max(h, t))
            if t != h and key not in existing:
                existing.add(key)
                tgt_edges[k] = (h, t)
                break
    tgt_triples = [(tgt_names[h], rels[r], tgt_names[t]) for (h, t), r in zip(tgt_edges, edge_rel)]

    n_unknown = int(round(spec.unknown_entity_ratio * n))
    unknown = _fresh_names(n_unknown, vocab, taken, rng)
    anchors = min(spec.min_anchor, n)
    for name in unknown:
        for j in rng.choice(n, size=anchors, replace=False).tolist():
            r = rels[rng.integers(RELATION_VOCAB)]
            tgt_triples.append((name, r, tgt_names[j]) if rng.random() < 0.5 else (tgt_names[j], r, name))

    src_triples = [src_triples[i] for i in rng.permutation(len(src_triples))]
    tgt_triples = [tgt_triples[i] for i in rng.permutation(len(tgt_triples))]
    g_s = build_graph(src_triples)
    g_t = build_graph(tgt_triples)
    pairs = np.array(
        [(g_s.entities.id(src_names[i]), g_t.entities.id(tgt_names[i])) for i in range(n)],
        dtype=np.int64,
    )
    return Benchmark(g_s, g_t, SeedAlignment(pairs, SeedKind.TRUTH), perturbed)

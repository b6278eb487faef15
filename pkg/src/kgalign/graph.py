"""Knowledge-graph representation and the alignment data model."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


class Interner:
    """Bidirectional label <-> dense id table. Ids follow first appearance."""

    def __init__(self, labels: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._labels: list[str] = []
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._ids[label] = idx
            self._labels.append(label)
        return idx

    def id(self, label: str) -> int:
        return self._ids[label]

    def get(self, label: str, default=None):
        return self._ids.get(label, default)

    def label(self, idx: int) -> str:
        return self._labels[idx]

    @property
    def labels(self) -> list[str]:
        return self._labels

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self._labels)


@dataclass(eq=False)
class KnowledgeGraph:
    """Interned entities/relations, directed triples and an undirected
    weighted adjacency (CSR) used for partitioning and aggregation.

    Multi-edges between one entity pair are collapsed into a single
    adjacency edge carrying the summed weight; self loops stay in
    ``triples`` but never enter the adjacency.
    """

    entities: Interner
    relations: Interner
    triples: np.ndarray  # (T, 3) int64: head, relation, tail
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    @property
    def num_edges(self) -> int:
        """Undirected adjacency edges (each counted once)."""
        return len(self.indices) // 2

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_entities
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(n, n))

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges (u < v) with their weights."""
        rows = np.repeat(np.arange(self.num_entities), self.degree())
        keep = rows < self.indices
        return rows[keep], self.indices[keep], self.weights[keep]

    def labelled_triples(self) -> list[tuple[str, str, str]]:
        ent, rel = self.entities.label, self.relations.label
        return [(ent(h), rel(r), ent(t)) for h, r, t in self.triples.tolist()]

    def names(self) -> list[str]:
        return list(self.entities.labels)


def _adjacency_from_triples(triples: np.ndarray, n: int, weight: float = 1.0):
    heads, tails = triples[:, 0], triples[:, 2]
    keep = heads != tails
    heads, tails = heads[keep], tails[keep]
    rows = np.concatenate([heads, tails])
    cols = np.concatenate([tails, heads])
    data = np.full(len(rows), weight, dtype=np.float64)
    adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.sort_indices()
    return (
        adj.indptr.astype(np.int64),
        adj.indices.astype(np.int64),
        adj.data.astype(np.float64),
    )


def build_graph(
    triples: Iterable[Sequence[str]],
    entities: Iterable[str] = (),
) -> KnowledgeGraph:
    """Intern labelled triples into a :class:`KnowledgeGraph`.

    ``entities`` optionally pre-registers labels (e.g. isolated entities)
    before those seen in triples.
    """
    ent = Interner()
    for label in entities:
        if not label:
            raise GraphError("entity labels must be non-empty")
        ent.add(label)
    rel = Interner()
    seen: set[tuple[int, int, int]] = set()
    rows: list[tuple[int, int, int]] = []
    for triple in triples:
        h, r, t = triple
        if not h or not r or not t:
            raise GraphError(f"labels must be non-empty strings: {triple!r}")
        key = (ent.add(h), rel.add(r), ent.add(t))
        if key not in seen:
            seen.add(key)
            rows.append(key)
    if not rows:
        raise GraphError("empty graph")
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    indptr, indices, weights = _adjacency_from_triples(arr, len(ent))
    return KnowledgeGraph(ent, rel, arr, indptr, indices, weights)


def neighbors(g: KnowledgeGraph, e: int) -> list[tuple[int, float]]:
    if not 0 <= e < g.num_entities:
        raise IndexError(f"entity id {e} out of range [0, {g.num_entities})")
    lo, hi = g.indptr[e], g.indptr[e + 1]
    return [(int(v), float(w)) for v, w in zip(g.indices[lo:hi], g.weights[lo:hi])]


def with_weights(g: KnowledgeGraph, indptr, indices, weights) -> KnowledgeGraph:
    """Same entities and triples, different partitioning adjacency."""
    return KnowledgeGraph(g.entities, g.relations, g.triples, indptr, indices, weights)


class SeedKind(str, enum.Enum):
    TRAIN = "train-seed"
    PSEUDO = "pseudo-seed"
    TRUTH = "ground-truth"


@dataclass
class SeedAlignment:
    """Ordered 1-to-1 list of (source id, target id) pairs."""

    pairs: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))
    kind: SeedKind = SeedKind.TRAIN

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        src, tgt = self.pairs[:, 0], self.pairs[:, 1]
        if len(np.unique(src)) != len(src) or len(np.unique(tgt)) != len(tgt):
            raise GraphError("seed alignment must be 1-to-1")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(map(tuple, self.pairs.tolist()))

    @property
    def sources(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def targets(self) -> np.ndarray:
        return self.pairs[:, 1]

    def validate(self, g_s: KnowledgeGraph, g_t: KnowledgeGraph) -> None:
        if len(self) == 0:
            return
        if self.sources.min() < 0 or self.sources.max() >= g_s.num_entities:
            raise GraphError("seed source id out of range")
        if self.targets.min() < 0 or self.targets.max() >= g_t.num_entities:
            raise GraphError("seed target id out of range")

    def union(self, other: "SeedAlignment") -> "SeedAlignment":
        """Pairs of ``self`` plus the non-conflicting pairs of ``other``."""
        used_s, used_t = set(self.sources.tolist()), set(self.targets.tolist())
        extra = [
            (s, t) for s, t in other if s not in used_s and t not in used_t
        ]
        pairs = np.vstack([self.pairs, np.asarray(extra, dtype=np.int64).reshape(-1, 2)])
        return SeedAlignment(pairs, self.kind)

    def split(self, ratio: float, rng: np.random.Generator) -> tuple["SeedAlignment", "SeedAlignment"]:
        order = rng.permutation(len(self))
        n_train = int(round(ratio * len(self)))
        train = self.pairs[np.sort(order[:n_train])]
        test = self.pairs[np.sort(order[n_train:])]
        return SeedAlignment(train, SeedKind.TRAIN), SeedAlignment(test, SeedKind.TRUTH)


@dataclass
class AlignmentMapping:
    """Predicted matches; each source id at most once."""

    sources: np.ndarray
    targets: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(np.unique(self.sources)) != len(self.sources):
            raise GraphError("each source may appear at most once in a mapping")

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self):
        return zip(self.sources.tolist(), self.targets.tolist(), self.scores.tolist())

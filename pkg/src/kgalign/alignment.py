"""Pseudo-seed augmentation, channel fusion, inference and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import AlignmentMapping, SeedAlignment, SeedKind
from .simmatrix import TopKSimilarityMatrix, union_add


@dataclass
class EvaluationReport:
    hits_at: dict[int, float]
    mrr: float
    evaluated_pairs: int
    co_location_rate: float | None = None
    edge_cut_rate: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hits_at"] = {str(n): v for n, v in self.hits_at.items()}
        return out


def _row_best(m: TopKSimilarityMatrix) -> np.ndarray:
    """Best target per row (rows are pre-sorted), -1 for empty rows."""
    best = np.full(m.n_source, -1, dtype=np.int64)
    nonempty = np.diff(m.indptr) > 0
    best[nonempty] = m.indices[m.indptr[:-1][nonempty]]
    return best


def _column_best(m: TopKSimilarityMatrix) -> np.ndarray:
    """Best stored source per column, ties to the lower source id."""
    rows, cols, vals = m.entries()
    best = np.full(m.n_target, -1, dtype=np.int64)
    if len(cols) == 0:
        return best
    order = np.lexsort((rows, -vals, cols))
    cols_sorted = cols[order]
    first = np.r_[True, cols_sorted[1:] != cols_sorted[:-1]]
    best[cols_sorted[first]] = rows[order][first]
    return best


def augment_seeds(m_n: TopKSimilarityMatrix, existing: SeedAlignment | None = None) -> SeedAlignment:
    """Mutual-best pairs of the name matrix, minus any pair touching an
    already seeded entity."""
    row_best = _row_best(m_n)
    col_best = _column_best(m_n)
    src = np.flatnonzero(row_best >= 0)
    tgt = row_best[src]
    mutual = col_best[tgt] == src
    src, tgt = src[mutual], tgt[mutual]
    if existing is not None and len(existing):
        clash = np.isin(src, existing.sources) | np.isin(tgt, existing.targets)
        src, tgt = src[~clash], tgt[~clash]
    return SeedAlignment(np.stack([src, tgt], axis=1), SeedKind.PSEUDO)


def fuse_channels(m_s: TopKSimilarityMatrix, m_n: TopKSimilarityMatrix) -> TopKSimilarityMatrix:
    """Equal-weight sum of structure and name similarity."""
    return union_add([(m_s, 1.0), (m_n, 1.0)], k=max(m_s.k, m_n.k))


def infer_alignment(m: TopKSimilarityMatrix) -> AlignmentMapping:
    """Row-wise argmax; rows without entries stay unmatched."""
    best = _row_best(m)
    src = np.flatnonzero(best >= 0)
    scores = m.scores[m.indptr[:-1][src]]
    return AlignmentMapping(src, best[src], scores)


def truth_ranks(m: TopKSimilarityMatrix, truth: SeedAlignment) -> np.ndarray:
    """1 + number of stored entries scoring strictly above the truth
    target; ``inf`` when the target is not stored in the row."""
    ranks = np.full(len(truth), np.inf)
    for i, (s, t) in enumerate(truth):
        if s >= m.n_source:
            continue
        cols, vals = m.row(s)
        hit = np.flatnonzero(cols == t)
        if len(hit):
            ranks[i] = 1 + np.count_nonzero(vals > vals[hit[0]])
    return ranks


def evaluate(m: TopKSimilarityMatrix, truth: SeedAlignment, ns=(1, 5)) -> EvaluationReport:
    if len(truth) == 0:
        raise ValueError("no pairs to evaluate")
    ranks = truth_ranks(m, truth)
    hits = {int(n): float(np.mean(ranks <= n)) for n in ns}
    mrr = float(np.mean(1.0 / ranks))
    return EvaluationReport(hits, mrr, len(truth))


def augmentation_precision(pseudo: SeedAlignment, truth: SeedAlignment) -> float:
    if len(pseudo) == 0:
        raise ValueError("no pseudo seeds")
    truth_set = set(truth)
    return sum(1 for p in pseudo if p in truth_set) / len(pseudo)


def write_mapping(path, mapping: AlignmentMapping, src_labels, tgt_labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t, v in mapping:
            fh.write(f"{src_labels[s]}\t{tgt_labels[t]}\t{v!r}\n")


def read_mapping(path, src_index, tgt_index) -> AlignmentMapping:
    s, t, v = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            a, b, score = line.split("\t")
            s.append(src_index.id(a))
            t.append(tgt_index.id(b))
            v.append(float(score))
    return AlignmentMapping(s, t, v)

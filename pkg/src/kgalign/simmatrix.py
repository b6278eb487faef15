"""Row-sparse top-k similarity matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    pass


def _topk_order(rows: np.ndarray, cols: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the entries that survive per-row top-k selection, in
    (row asc, score desc, col asc) order."""
    order = np.lexsort((cols, -scores, rows))
    rows_sorted = rows[order]
    if len(rows_sorted) == 0:
        return order
    # position of each entry within its row
    starts = np.r_[0, np.flatnonzero(np.diff(rows_sorted)) + 1]
    run_lengths = np.diff(np.r_[starts, len(rows_sorted)])
    pos = np.arange(len(rows_sorted)) - np.repeat(starts, run_lengths)
    return order[pos < k]


@dataclass(eq=False)
class TopKSimilarityMatrix:
    """At most ``k`` scored target candidates per source row.

    Stored CSR-style: row ``s`` owns ``indices[indptr[s]:indptr[s+1]]``,
    sorted by descending score, ties by ascending target id. Missing
    entries read as 0.
    """

    n_source: int
    n_target: int
    k: int
    indptr: np.ndarray
    indices: np.ndarray
    scores: np.ndarray

    @classmethod
    def from_entries(cls, n_source, n_target, k, rows, cols, scores) -> "TopKSimilarityMatrix":
        """Build from COO entries; duplicates of one (row, col) must be
        merged by the caller."""
        if k < 1:
            raise ValueError("k must be >= 1")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        keep = _topk_order(rows, cols, scores, k)
        rows, cols, scores = rows[keep], cols[keep], scores[keep]
        indptr = np.zeros(n_source + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(n_source, n_target, k, indptr, cols, scores)

    @classmethod
    def empty(cls, n_source: int, n_target: int, k: int = 1) -> "TopKSimilarityMatrix":
        return cls.from_entries(n_source, n_target, k, [], [], [])

    @classmethod
    def from_dense(cls, dense: np.ndarray, k: int, keep_zeros: bool = False) -> "TopKSimilarityMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        mask = np.ones(dense.shape, bool) if keep_zeros else dense != 0
        rows, cols = np.nonzero(mask)
        return cls.from_entries(dense.shape[0], dense.shape[1], k, rows, cols, dense[rows, cols])

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_source), np.diff(self.indptr))

    def row(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[s], self.indptr[s + 1]
        return self.indices[lo:hi], self.scores[lo:hi]

    def get(self, s: int, t: int) -> float:
        cols, vals = self.row(s)
        hit = np.flatnonzero(cols == t)
        return float(vals[hit[0]]) if len(hit) else 0.0

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_source, self.n_target))
        out[self.row_ids(), self.indices] = self.scores
        return out

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.row_ids(), self.indices, self.scores

    def scaled(self, factor: float) -> "TopKSimilarityMatrix":
        return TopKSimilarityMatrix(
            self.n_source, self.n_target, self.k, self.indptr.copy(),
            self.indices.copy(), self.scores * factor,
        )

    def check(self) -> None:
        """Assert the storage invariants."""
        counts = np.diff(self.indptr)
        assert counts.max(initial=0) <= self.k
        assert self.nnz <= self.k * self.n_source
        rows = self.row_ids()
        same = rows[1:] == rows[:-1]
        ds = self.scores[1:] - self.scores[:-1]
        assert np.all(~same | (ds < 0) | ((ds == 0) & (self.indices[1:] > self.indices[:-1])))


def union_add(
    terms: list[tuple[TopKSimilarityMatrix, float]], k: int
) -> TopKSimilarityMatrix:
    """Weighted sparse sum of matrices over one id space, top-k per row."""
    first = terms[0][0]
    shape = (first.n_source, first.n_target)
    for m, _ in terms:
        if (m.n_source, m.n_target) != shape:
            raise ShapeMismatch(
                f"id-space mismatch: {(m.n_source, m.n_target)} vs {shape}"
            )
    rows = np.concatenate([m.row_ids() for m, _ in terms])
    cols = np.concatenate([m.indices for m, _ in terms])
    vals = np.concatenate([m.scores * w for m, w in terms])
    key = rows * shape[1] + cols
    uniq, inverse = np.unique(key, return_inverse=True)
    summed = np.bincount(inverse, weights=vals, minlength=len(uniq))
    return TopKSimilarityMatrix.from_entries(
        shape[0], shape[1], k, uniq // shape[1], uniq % shape[1], summed
    )


def distances_to_similarity(distances: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Global min-max conversion: the smallest kept distance maps to 1."""
    if len(distances) == 0:
        return distances.astype(np.float64)
    d_min, d_max = distances.min(), distances.max()
    return 1.0 - (distances - d_min) / (d_max - d_min + eps)


def write_matrix(path, m: TopKSimilarityMatrix, src_labels, tgt_labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t, v in zip(*(a.tolist() for a in m.entries())):
            fh.write(f"{src_labels[s]}\t{tgt_labels[t]}\t{v!r}\n")


def read_matrix(path, src_index, tgt_index, k: int | None = None) -> TopKSimilarityMatrix:
    """Load a ``source<TAB>target<TAB>score`` file. ``src_index`` /
    ``tgt_index`` are :class:`~kgalign.graph.Interner` tables."""
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            s, t, v = line.split("\t")
            rows.append(src_index.id(s))
            cols.append(tgt_index.id(t))
            vals.append(float(v))
    rows_arr = np.asarray(rows, dtype=np.int64)
    if k is None:
        k = int(np.bincount(rows_arr).max()) if len(rows_arr) else 1
    return TopKSimilarityMatrix.from_entries(
        len(src_index), len(tgt_index), k, rows_arr, cols, vals
    )

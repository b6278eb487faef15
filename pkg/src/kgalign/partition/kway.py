"""Multilevel k-way edge-cut partitioner.

Three stages, METIS style:

1. coarsen by heavy-edge matching until the graph is small,
2. grow K regions on the coarsest graph from spread-out seed vertices,
3. project back level by level, refining with greedy boundary moves.

Balance is counted in original vertices: every part holds at most
``floor((1 + imbalance) * ceil(n / K))`` of them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from ..graph import KnowledgeGraph

log = logging.getLogger(__name__)

REFINE_PASSES = 8
INIT_TRIALS = 4


class PartitionError(ValueError):
    pass


@dataclass
class Partition:
    assignment: np.ndarray
    K: int
    imbalance: float = 0.1

    @property
    def capacity(self) -> int:
        return part_capacity(len(self.assignment), self.K, self.imbalance)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    def members(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == part)

    def is_balanced(self) -> bool:
        return bool(self.sizes().max() <= self.capacity)


def part_capacity(n: int, K: int, imbalance: float) -> int:
    # the 1e-9 guards (1 + 0.1) * 10 landing at 10.999...
    return int(math.floor((1.0 + imbalance) * math.ceil(n / K) + 1e-9))


@dataclass
class _Level:
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    vwgt: np.ndarray
    cmap: np.ndarray | None = None  # fine vertex -> coarse vertex of next level

    @property
    def n(self) -> int:
        return len(self.vwgt)

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))


def _heavy_edge_matching(level: _Level, max_vwgt: int, rng: np.random.Generator) -> np.ndarray:
    indptr = level.indptr.tolist()
    indices = level.indices.tolist()
    weights = level.weights.tolist()
    vwgt = level.vwgt.tolist()
    match = [-1] * level.n
    for v in rng.permutation(level.n).tolist():
        if match[v] >= 0:
            continue
        best, best_w = v, 0.0
        limit = max_vwgt - vwgt[v]
        for j in range(indptr[v], indptr[v + 1]):
            u = indices[j]
            w = weights[j]
            if w > best_w and match[u] < 0 and u != v and vwgt[u] <= limit:
                best, best_w = u, w
        match[v] = best
        match[best] = v
    match_arr = np.asarray(match, dtype=np.int64)
    # coarse ids in order of the smaller endpoint
    leader = np.minimum(np.arange(level.n), match_arr)
    _, cmap = np.unique(leader, return_inverse=True)
    return cmap.astype(np.int64)


def _contract(level: _Level, cmap: np.ndarray) -> _Level:
    nc = int(cmap.max()) + 1
    proj = sp.csr_matrix((np.ones(level.n), (np.arange(level.n), cmap)), shape=(level.n, nc))
    coarse = (proj.T @ level.matrix() @ proj).tocsr()
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    coarse.sort_indices()
    vwgt = np.bincount(cmap, weights=level.vwgt, minlength=nc).astype(np.int64)
    return _Level(
        coarse.indptr.astype(np.int64),
        coarse.indices.astype(np.int64),
        coarse.data.astype(np.float64),
        vwgt,
    )


def _cut(level: _Level, part: np.ndarray) -> float:
    rows = np.repeat(np.arange(level.n), np.diff(level.indptr))
    crossing = part[rows] != part[level.indices]
    return float(level.weights[crossing].sum()) / 2.0


def _spread_seeds(level: _Level, K: int, rng: np.random.Generator) -> list[int]:
    """K vertices chosen greedily far apart in hop distance."""
    mat = level.matrix()
    seeds = [int(rng.integers(level.n))]
    mindist = np.full(level.n, np.inf)
    while len(seeds) < K:
        d = csgraph.shortest_path(mat, unweighted=True, indices=seeds[-1], directed=False)
        mindist = np.minimum(mindist, d)
        mindist[seeds] = -1.0
        far = np.flatnonzero(mindist == mindist.max())
        seeds.append(int(rng.choice(far)))
    return seeds


def _grow_regions(level: _Level, K: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    n = level.n
    part = np.full(n, -1, dtype=np.int64)
    pw = np.zeros(K, dtype=np.int64)
    conn = np.zeros((K, n))
    vwgt = level.vwgt
    free = np.ones(n, dtype=bool)

    def take(v: int, p: int) -> None:
        part[v] = p
        pw[p] += vwgt[v]
        free[v] = False
        lo, hi = level.indptr[v], level.indptr[v + 1]
        conn[p, level.indices[lo:hi]] += level.weights[lo:hi]

    for p, v in enumerate(_spread_seeds(level, K, rng)):
        take(v, p)
    active = np.ones(K, dtype=bool)
    while free.any():
        if not active.any():
            # nothing fits anywhere; put the rest on the lightest parts
            for v in np.flatnonzero(free):
                take(int(v), int(np.argmin(pw)))
            break
        p = int(np.flatnonzero(active)[np.argmin(pw[active])])
        fits = free & (pw[p] + vwgt <= cap)
        if not fits.any():
            active[p] = False
            continue
        frontier = fits & (conn[p] > 0)
        if frontier.any():
            # prefer vertices pulled harder by p than by any rival part
            rival = np.delete(conn, p, axis=0).max(axis=0) if K > 1 else 0.0
            scores = np.where(frontier, conn[p] - rival, -np.inf)
            v = int(np.argmax(scores))
        else:
            # frontier exhausted (disconnected graph): restart anywhere
            v = int(np.flatnonzero(fits)[0])
        take(v, p)
    return part


def _refine(level: _Level, part: np.ndarray, K: int, cap: int, passes: int = REFINE_PASSES) -> np.ndarray:
    """Greedy boundary refinement: single-vertex moves with positive cut
    gain (or zero gain that improves balance), never exceeding ``cap``."""
    part_l = part.tolist()
    indptr = level.indptr.tolist()
    indices = level.indices.tolist()
    weights = level.weights.tolist()
    vwgt = level.vwgt.tolist()
    pw = np.bincount(part, weights=level.vwgt, minlength=K).astype(np.int64).tolist()
    rows = np.repeat(np.arange(level.n), np.diff(level.indptr))
    for _ in range(passes):
        pa = np.asarray(part_l)
        boundary = np.unique(rows[pa[rows] != pa[level.indices]]).tolist()
        moved = 0
        for v in boundary:
            p = part_l[v]
            wv = vwgt[v]
            if pw[p] - wv <= 0:
                continue
            conn: dict[int, float] = {}
            for j in range(indptr[v], indptr[v + 1]):
                q = part_l[indices[j]]
                conn[q] = conn.get(q, 0.0) + weights[j]
            own = conn.get(p, 0.0)
            best_q, best_gain, best_pw = -1, 0.0, 0
            for q, c in conn.items():
                if q == p or pw[q] + wv > cap:
                    continue
                gain = c - own
                if gain > best_gain or (
                    best_q >= 0 and gain == best_gain and pw[q] < best_pw
                ):
                    best_q, best_gain, best_pw = q, gain, pw[q]
                elif best_q < 0 and gain == 0 and pw[q] + wv < pw[p]:
                    best_q, best_gain, best_pw = q, gain, pw[q]
            if best_q >= 0:
                part_l[v] = best_q
                pw[p] -= wv
                pw[best_q] += wv
                moved += 1
        if moved == 0:
            break
    return np.asarray(part_l, dtype=np.int64)


def _rebalance(level: _Level, part: np.ndarray, K: int, cap: int) -> np.ndarray:
    """Evict vertices from overweight parts, cheapest cut damage first."""
    part = part.copy()
    mat = level.matrix()
    pw = np.bincount(part, weights=level.vwgt, minlength=K).astype(np.int64)
    while pw.max() > cap:
        onehot = sp.csr_matrix((np.ones(level.n), (np.arange(level.n), part)), shape=(level.n, K))
        conn = (mat @ onehot).toarray()
        own = conn[np.arange(level.n), part]
        room = cap - pw
        moved_any = False
        for p in np.flatnonzero(pw > cap):
            members = np.flatnonzero(part == p)
            for _ in range(int(pw[p] - cap)):
                if pw[p] <= cap:
                    break
                fits = room[None, :] >= level.vwgt[members][:, None]
                fits[:, p] = False
                gain = np.where(fits, conn[members] - own[members][:, None], -np.inf)
                if not np.isfinite(gain).any():
                    break
                i, q = np.unravel_index(int(np.argmax(gain)), gain.shape)
                v = members[i]
                part[v] = q
                pw[p] -= level.vwgt[v]
                pw[q] += level.vwgt[v]
                room = cap - pw
                members = np.delete(members, i)
                moved_any = True
            if moved_any:
                break  # connectivity changed; recompute
        if not moved_any:
            raise PartitionError("cannot satisfy the balance constraint")
    return part


def _fill_empty(level: _Level, part: np.ndarray, K: int) -> np.ndarray:
    sizes = np.bincount(part, minlength=K)
    for p in np.flatnonzero(sizes == 0):
        donor = int(np.argmax(np.bincount(part, minlength=K)))
        members = np.flatnonzero(part == donor)
        degree = np.diff(level.indptr)[members]
        part[members[int(np.argmin(degree))]] = p
    return part


def _multilevel(finest: _Level, K: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    n = finest.n
    levels = [finest]
    coarsen_to = max(200, 20 * K)
    max_vwgt = max(1, int(1.5 * n / coarsen_to))
    while levels[-1].n > coarsen_to:
        cur = levels[-1]
        cmap = _heavy_edge_matching(cur, max_vwgt, rng)
        if cmap.max() + 1 > 0.95 * cur.n:
            break
        levels.append(_contract(cur, cmap))
        levels[-2] = replace(cur, cmap=cmap)

    coarsest = levels[-1]
    best, best_cut = None, np.inf
    for _ in range(INIT_TRIALS):
        trial = _refine(coarsest, _grow_regions(coarsest, K, cap, rng), K, cap)
        c = _cut(coarsest, trial)
        if c < best_cut:
            best, best_cut = trial, c
    part = best
    for level in reversed(levels[:-1]):
        part = _refine(level, part[level.cmap], K, cap)
    if np.bincount(part, minlength=K).max() > cap:
        part = _refine(finest, _rebalance(finest, part, K, cap), K, cap)
    return _fill_empty(finest, part, K)


def kway_csr(
    indptr: np.ndarray,
    indices: np.ndarray,
    weights: np.ndarray,
    K: int,
    imbalance: float = 0.1,
    rng_seed: int = 0,
    ncuts: int = 1,
) -> np.ndarray:
    """Partition a symmetric weighted CSR graph into K balanced parts.

    ``ncuts`` independent multilevel runs are made and the lowest cut kept.
    """
    n = len(indptr) - 1
    if K < 1:
        raise PartitionError("K must be >= 1")
    if K > n:
        raise PartitionError(f"K={K} exceeds the number of vertices ({n})")
    if ncuts < 1:
        raise PartitionError("ncuts must be >= 1")
    if K == 1:
        return np.zeros(n, dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    cap = part_capacity(n, K, imbalance)
    finest = _Level(
        np.asarray(indptr, dtype=np.int64),
        np.asarray(indices, dtype=np.int64),
        np.asarray(weights, dtype=np.float64),
        np.ones(n, dtype=np.int64),
    )
    best, best_cut = None, np.inf
    for _ in range(ncuts):
        part = _multilevel(finest, K, cap, rng)
        c = _cut(finest, part)
        if c < best_cut:
            best, best_cut = part, c
    return best


def partition_kway(g: KnowledgeGraph, K: int, imbalance: float = 0.1, rng_seed: int = 0) -> Partition:
    if K < 1:
        raise PartitionError("K must be >= 1")
    if K > g.num_entities:
        raise PartitionError(f"K={K} exceeds the number of entities ({g.num_entities})")
    assignment = kway_csr(g.indptr, g.indices, g.weights, K, imbalance, rng_seed)
    return Partition(assignment, K, imbalance)


def cut_weight(g: KnowledgeGraph, assignment: np.ndarray) -> float:
    u, v, w = g.edge_list()
    return float(w[assignment[u] != assignment[v]].sum())


def edge_cut_rate(g: KnowledgeGraph, p: Partition | np.ndarray) -> float:
    """Fraction of (unweighted) adjacency edges whose endpoints are split."""
    assignment = p.assignment if isinstance(p, Partition) else np.asarray(p)
    if len(assignment) != g.num_entities:
        raise ValueError("partition does not cover the graph")
    u, v, _ = g.edge_list()
    if len(u) == 0:
        return 0.0
    return float(np.count_nonzero(assignment[u] != assignment[v]) / len(u))

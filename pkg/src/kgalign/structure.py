"""Per-batch structural embeddings and the block-diagonal top-k matrix.

The model is a plain mean-aggregation GNN over the union of a batch's
source and target subgraphs (two disconnected components sharing the
layer weights). Every layer computes ``act((A @ H) @ W)`` where ``A`` is
the row-normalised ``I + adjacency``; output rows are L2 normalised.
Training minimises a margin loss on Manhattan distances with negatives
drawn from each anchor's nearest neighbours, using Adam. Gradients are
hand-derived; see ``tests/test_structure.py`` for the finite-difference
check.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .graph import KnowledgeGraph
from .partition.batches import MiniBatch, induced_edges
from .simmatrix import TopKSimilarityMatrix, distances_to_similarity

log = logging.getLogger(__name__)

NEGATIVE_REFRESH = 10
_NORM_FLOOR = 1e-12


@dataclass
class EmbeddingTable:
    """Row ``i`` embeds entity ``ids[i]``."""

    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] == 0:
            raise ValueError("embedding dimension must be > 0")
        if len(self.ids) != len(self.vectors):
            raise ValueError("one id per row required")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class BatchEmbeddings:
    source: EmbeddingTable
    target: EmbeddingTable
    loss_history: list[float] = field(default_factory=list)


@dataclass
class GnnConfig:
    layers: int = 2
    dim: int = 100
    activation: str = "tanh"  # or "linear"

    def __post_init__(self):
        if self.layers < 0 or self.dim < 1:
            raise ValueError("layers >= 0 and dim >= 1 required")
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class TripletConfig:
    margin: float = 1.0
    negatives_per_pair: int = 5
    epochs: int = 100
    learning_rate: float = 0.005

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class BatchGraph:
    """Local view of one mini-batch: sources take rows ``0..ns-1``,
    targets ``ns..ns+nt-1``."""

    source_ids: np.ndarray
    target_ids: np.ndarray
    agg: sp.csr_matrix  # mean-aggregation operator over {self} ∪ neighbours
    seeds: np.ndarray  # (P, 2) local rows (source row, target row)

    @property
    def n_source(self) -> int:
        return len(self.source_ids)

    @property
    def n_target(self) -> int:
        return len(self.target_ids)

    @property
    def size(self) -> int:
        return self.n_source + self.n_target

    @classmethod
    def from_edges(cls, source_ids, target_ids, src_edges, tgt_edges, seeds=()) -> "BatchGraph":
        """``*_edges`` are (u, v) arrays in local side coordinates."""
        ns, nt = len(source_ids), len(target_ids)
        n = ns + nt
        su, sv = (np.asarray(a, dtype=np.int64) for a in src_edges)
        tu, tv = (np.asarray(a, dtype=np.int64) + ns for a in tgt_edges)
        u = np.concatenate([su, tu, sv, tv, np.arange(n)])
        v = np.concatenate([sv, tv, su, tu, np.arange(n)])
        adj = sp.csr_matrix((np.ones(len(u)), (u, v)), shape=(n, n))
        adj.data[:] = 1.0  # neighbour sets, not multisets
        deg = np.asarray(adj.sum(axis=1)).ravel()
        agg = sp.diags(1.0 / deg) @ adj
        seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 2).copy()
        seeds[:, 1] += ns
        return cls(np.asarray(source_ids), np.asarray(target_ids), agg.tocsr(), seeds)

    @classmethod
    def from_batch(cls, batch: MiniBatch, g_s: KnowledgeGraph, g_t: KnowledgeGraph) -> "BatchGraph":
        src, tgt = batch.source_entities, batch.target_entities
        s_local = np.full(g_s.num_entities, -1, dtype=np.int64)
        t_local = np.full(g_t.num_entities, -1, dtype=np.int64)
        s_local[src] = np.arange(len(src))
        t_local[tgt] = np.arange(len(tgt))
        su, sv = induced_edges(g_s, src)
        tu, tv = induced_edges(g_t, tgt)
        seeds = batch.local_seeds.pairs
        local = np.stack([s_local[seeds[:, 0]], t_local[seeds[:, 1]]], axis=1)
        return cls.from_edges(
            src, tgt, (s_local[su], s_local[sv]), (t_local[tu], t_local[tv]), local
        )


@dataclass
class GnnParams:
    features: np.ndarray  # (n, dim) trainable input embeddings
    weights: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        return [self.features, *self.weights]


def init_params(n: int, cfg: GnnConfig, rng: np.random.Generator) -> GnnParams:
    scale = 1.0 / np.sqrt(cfg.dim)
    features = rng.uniform(-scale, scale, size=(n, cfg.dim))
    limit = np.sqrt(6.0 / (2 * cfg.dim))
    weights = [rng.uniform(-limit, limit, size=(cfg.dim, cfg.dim)) for _ in range(cfg.layers)]
    return GnnParams(features, weights)


@dataclass
class _Cache:
    aggregated: list[np.ndarray]
    activated: list[np.ndarray]
    norms: np.ndarray
    out: np.ndarray


def _forward(graph: BatchGraph, params: GnnParams, activation: str) -> _Cache:
    h = params.features
    aggregated, activated = [], []
    for w in params.weights:
        m = graph.agg @ h
        z = m @ w
        h = np.tanh(z) if activation == "tanh" else z
        aggregated.append(m)
        activated.append(h)
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), _NORM_FLOOR)
    return _Cache(aggregated, activated, norms, h / norms)


def _backward(graph: BatchGraph, params: GnnParams, cache: _Cache, d_out: np.ndarray, activation: str) -> list[np.ndarray]:
    y = cache.out
    d_h = (d_out - y * np.sum(d_out * y, axis=1, keepdims=True)) / cache.norms
    d_weights = [None] * len(params.weights)
    for layer in reversed(range(len(params.weights))):
        h = cache.activated[layer]
        d_z = d_h * (1.0 - h * h) if activation == "tanh" else d_h
        d_weights[layer] = cache.aggregated[layer].T @ d_z
        d_h = graph.agg.T @ (d_z @ params.weights[layer].T)
    return [d_h, *d_weights]


def gnn_forward(graph: BatchGraph, cfg: GnnConfig, params: GnnParams) -> np.ndarray:
    if params.features.shape != (graph.size, cfg.dim):
        raise ValueError(
            f"features have shape {params.features.shape}, expected {(graph.size, cfg.dim)}"
        )
    for w in params.weights:
        if w.shape != (cfg.dim, cfg.dim):
            raise ValueError(f"weight shape {w.shape} does not match dim {cfg.dim}")
    return _forward(graph, params, cfg.activation).out


def manhattan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).sum(axis=-1)


def triplet_terms(emb: np.ndarray, pairs: np.ndarray, negatives: np.ndarray, margin: float):
    """Hinge terms ``max(0, d_pos + margin - d_neg)``.

    ``pairs`` is (P, 2) row indices, ``negatives`` (P, n, 2). Returns the
    loss and its gradient w.r.t. ``emb``.
    """
    pos_diff = emb[pairs[:, 0]] - emb[pairs[:, 1]]  # (P, D)
    d_pos = np.abs(pos_diff).sum(axis=1)
    neg_diff = emb[negatives[..., 0]] - emb[negatives[..., 1]]  # (P, n, D)
    d_neg = np.abs(neg_diff).sum(axis=2)
    terms = d_pos[:, None] + margin - d_neg
    active = terms > 0
    loss = float(terms[active].sum())

    grad = np.zeros_like(emb)
    n_active = active.sum(axis=1).astype(np.float64)
    g_pos = np.sign(pos_diff) * n_active[:, None]
    np.add.at(grad, pairs[:, 0], g_pos)
    np.add.at(grad, pairs[:, 1], -g_pos)
    g_neg = np.sign(neg_diff) * active[..., None]
    np.add.at(grad, negatives[..., 0].ravel(), -g_neg.reshape(-1, emb.shape[1]))
    np.add.at(grad, negatives[..., 1].ravel(), g_neg.reshape(-1, emb.shape[1]))
    return loss, grad


def triplet_loss(
    graph: BatchGraph,
    gnn: GnnConfig,
    params: GnnParams,
    pairs: np.ndarray,
    negatives: np.ndarray,
    cfg: TripletConfig,
) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients for ``[features, *weights]``."""
    cache = _forward(graph, params, gnn.activation)
    loss, d_out = triplet_terms(cache.out, pairs, negatives, cfg.margin)
    return loss, _backward(graph, params, cache, d_out, gnn.activation)


def _nearest_pool(emb: np.ndarray, anchors: np.ndarray, side: np.ndarray, size: int) -> np.ndarray:
    """For each anchor row, the ``size`` nearest rows of ``side`` (by
    Manhattan distance, ties by index), excluding the anchor itself."""
    d = cdist(emb[anchors], emb[side], metric="cityblock")
    d[side[None, :] == anchors[:, None]] = np.inf
    order = np.argsort(d, axis=1, kind="stable")[:, :size]
    return side[order]


def sample_negatives_all(
    emb: np.ndarray,
    pairs: np.ndarray,
    n_source: int,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Negatives for every pair: (P, n, 2). Even slots replace the source
    side, odd slots the target side."""
    total = len(emb)
    if n_source < 2 or total - n_source < 2:
        raise ValueError("need at least 2 entities on each side to sample negatives")
    t_pool = max(25, 5 * n)
    sources = np.arange(n_source)
    targets = np.arange(n_source, total)
    src_pool = _nearest_pool(emb, pairs[:, 0], sources, min(t_pool, n_source - 1))
    tgt_pool = _nearest_pool(emb, pairs[:, 1], targets, min(t_pool, total - n_source - 1))
    out = np.empty((len(pairs), n, 2), dtype=np.int64)
    out[:, :, 0] = pairs[:, None, 0]
    out[:, :, 1] = pairs[:, None, 1]
    for j in range(n):
        if j % 2 == 0:
            pick = rng.integers(src_pool.shape[1], size=len(pairs))
            out[:, j, 0] = src_pool[np.arange(len(pairs)), pick]
        else:
            pick = rng.integers(tgt_pool.shape[1], size=len(pairs))
            out[:, j, 1] = tgt_pool[np.arange(len(pairs)), pick]
    return out


def sample_negatives(
    pair: tuple[int, int],
    emb: np.ndarray,
    n_source: int,
    n: int,
    rng_seed: int = 0,
) -> list[tuple[int, int]]:
    """Negatives for one (source row, target row) pair of a batch."""
    pairs = np.asarray([pair], dtype=np.int64)
    negs = sample_negatives_all(emb, pairs, n_source, n, np.random.default_rng(rng_seed))
    return [tuple(x) for x in negs[0].tolist()]


class Adam:
    def __init__(self, tensors: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t) for t in tensors]
        self.v = [np.zeros_like(t) for t in tensors]
        self.t = 0

    def step(self, tensors: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_batch(
    graph: BatchGraph,
    gnn: GnnConfig,
    trip: TripletConfig,
    rng_seed: int = 0,
) -> BatchEmbeddings:
    rng = np.random.default_rng(rng_seed)
    params = init_params(graph.size, gnn, rng)
    history: list[float] = []
    pairs = graph.seeds
    can_train = len(pairs) > 0 and graph.n_source >= 2 and graph.n_target >= 2
    if not can_train and trip.epochs > 0:
        log.warning("batch without usable seeds (%d pairs); skipping training", len(pairs))
    if can_train:
        opt = Adam(params.tensors(), trip.learning_rate)
        negatives = None
        for epoch in range(trip.epochs):
            cache = _forward(graph, params, gnn.activation)
            if epoch % NEGATIVE_REFRESH == 0:
                negatives = sample_negatives_all(
                    cache.out, pairs, graph.n_source, trip.negatives_per_pair, rng
                )
            loss, d_out = triplet_terms(cache.out, pairs, negatives, trip.margin)
            history.append(loss)
            grads = _backward(graph, params, cache, d_out, gnn.activation)
            opt.step(params.tensors(), grads)
    out = _forward(graph, params, gnn.activation).out
    ns = graph.n_source
    return BatchEmbeddings(
        EmbeddingTable(graph.source_ids, out[:ns]),
        EmbeddingTable(graph.target_ids, out[ns:]),
        history,
    )


def batch_topk(
    src: EmbeddingTable, tgt: EmbeddingTable, rows: np.ndarray | None, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact Manhattan top-k of ``src`` rows against all of ``tgt``.

    Returns global (source id, target id, distance) triples; ties go to
    the smaller target id.
    """
    sel = np.arange(len(src)) if rows is None else rows
    if len(sel) == 0 or len(tgt) == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    d = cdist(src.vectors[sel], tgt.vectors, metric="cityblock")
    id_order = np.argsort(tgt.ids, kind="stable")
    d = d[:, id_order]
    kk = min(k, len(tgt))
    order = np.argsort(d, axis=1, kind="stable")[:, :kk]
    dist = np.take_along_axis(d, order, axis=1)
    s_ids = np.repeat(src.ids[sel], kk)
    t_ids = tgt.ids[id_order][order].ravel()
    return s_ids, t_ids, dist.ravel()


def structure_similarity(
    batches: list[MiniBatch],
    embs: list[BatchEmbeddings],
    k: int,
    n_source: int,
    n_target: int,
    eps: float = 1e-8,
) -> TopKSimilarityMatrix:
    """Block-diagonal top-k matrix: each source row is scored only against
    the targets of its own batch."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(batches) != len(embs):
        raise ValueError("one embedding set per batch required")
    parts_s, parts_t, parts_d = [], [], []
    for batch, emb in zip(batches, embs):
        scored = batch.scored_sources
        pos = np.searchsorted(emb.source.ids, scored)
        s, t, d = batch_topk(emb.source, emb.target, pos, k)
        parts_s.append(s)
        parts_t.append(t)
        parts_d.append(d)
    s = np.concatenate(parts_s) if parts_s else np.empty(0, dtype=np.int64)
    t = np.concatenate(parts_t) if parts_t else np.empty(0, dtype=np.int64)
    d = np.concatenate(parts_d) if parts_d else np.empty(0)
    sim = distances_to_similarity(d, eps)
    return TopKSimilarityMatrix.from_entries(n_source, n_target, k, s, t, sim)


MAGIC = b"KGEMB\x00\x01\x00"


def write_embeddings(path, vectors: np.ndarray, labels: list[str]) -> None:
    """Binary checkpoint plus a ``.labels`` sidecar (one label per row)."""
    path = Path(path)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    n, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, dim))
        fh.write(vectors.tobytes())
    with open(str(path) + ".labels", "w", encoding="utf-8") as fh:
        for label in labels:
            fh.write(label + "\n")


def read_embeddings(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not an embedding checkpoint")
        n, dim = struct.unpack("<II", fh.read(8))
        vectors = np.frombuffer(fh.read(4 * n * dim), dtype="<f4").reshape(n, dim)
    labels_path = Path(str(path) + ".labels")
    labels = labels_path.read_text(encoding="utf-8").split("\n")[:n] if labels_path.exists() else []
    return vectors.astype(np.float64), labels

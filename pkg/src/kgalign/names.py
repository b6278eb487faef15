"""Name similarity: semantic top-k over max-pooled token embeddings,
MinHash-LSH blocked Levenshtein similarity, and their weighted fusion."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from .simmatrix import TopKSimilarityMatrix, distances_to_similarity, union_add

log = logging.getLogger(__name__)

MERSENNE_61 = (1 << 61) - 1
_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


@dataclass
class NffConfig:
    gamma_fusion: float = 0.05
    theta: float = 0.5
    phi: int = 50
    epsilon: float = 1e-8
    segments: int = 4
    minhash_perms: int = 128
    minhash_seed: int = 1

    def __post_init__(self):
        if not 0 < self.gamma_fusion <= 1:
            raise ValueError("gamma_fusion must lie in (0, 1]")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.phi < 1:
            raise ValueError("phi must be >= 1")
        if self.segments < 1 or self.minhash_perms < 1:
            raise ValueError("segments and minhash_perms must be >= 1")


def tokenize(name: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub("", name.lower()).split()


def _hash64(text: str, salt: bytes = b"") -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8, salt=salt).digest(), "little")


# ---------------------------------------------------------------- embedding


class NameEmbedder:
    """Token -> vector lookup followed by max-pooling.

    ``hash`` mode needs no model: each token becomes the sum of its
    character trigrams' hashed sign patterns over ``dim`` buckets. ``file`` mode reads
    precomputed token vectors; tokens missing from the file are skipped.
    """

    def __init__(self, mode: str = "hash", dim: int | None = None, token_vectors: dict[str, np.ndarray] | None = None):
        if mode not in ("hash", "file"):
            raise ValueError(f"unknown embedder mode {mode!r}")
        self.mode = mode
        if mode == "file":
            if not token_vectors:
                raise ValueError("file mode needs token vectors")
            self.token_vectors = token_vectors
            self.dim = len(next(iter(token_vectors.values())))
        else:
            self.token_vectors = {}
            self.dim = dim or 256
        self._cache: dict[str, np.ndarray | None] = {}

    @classmethod
    def from_file(cls, path) -> "NameEmbedder":
        vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                token, values = line.split("\t", 1)
                vectors[token] = np.asarray(values.split(), dtype=np.float64)
        return cls("file", token_vectors=vectors)

    def token_vector(self, token: str) -> np.ndarray | None:
        vec = self._cache.get(token)
        if vec is None and token not in self._cache:
            vec = self._hashed(token) if self.mode == "hash" else self.token_vectors.get(token)
            self._cache[token] = vec
        return vec

    def _hashed(self, token: str) -> np.ndarray:
        padded = f"#{token}#"
        grams = [padded[i : i + 3] for i in range(max(1, len(padded) - 2))]
        return np.sum([self._gram_signs(g) for g in grams], axis=0)

    def _gram_signs(self, gram: str) -> np.ndarray:
        # a dense +-1 pattern per trigram; one sparse bucket per trigram
        # lets max-pooling cancel whole names to zero
        blocks, raw = -(-self.dim // 512), b""
        for i in range(blocks):
            raw += hashlib.blake2b(gram.encode("utf-8"), digest_size=64, salt=i.to_bytes(8, "little")).digest()
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[: self.dim]
        return bits.astype(np.float64) * 2.0 - 1.0


def embed_name(name: str, emb: NameEmbedder, eps: float = 1e-8) -> np.ndarray:
    """Max-pool the token vectors, then scale to (almost) unit L2 norm."""
    vectors = [v for v in (emb.token_vector(t) for t in tokenize(name)) if v is not None]
    if not vectors:
        log.warning("name %r has no embeddable tokens; using a zero vector", name)
        return np.zeros(emb.dim)
    h = np.max(np.stack(vectors), axis=0)
    return h / (np.linalg.norm(h) + eps)


def embed_names(names: list[str], emb: NameEmbedder, eps: float = 1e-8) -> np.ndarray:
    if not names:
        return np.zeros((0, emb.dim))
    return np.stack([embed_name(n, emb, eps) for n in names])


# ---------------------------------------------------------- semantic top-k


def _merge_topk(d_a, i_a, d_b, i_b, k):
    d = np.concatenate([d_a, d_b], axis=1)
    i = np.concatenate([i_a, i_b], axis=1)
    order = np.lexsort((i, d), axis=1)[:, :k]
    return np.take_along_axis(d, order, axis=1), np.take_along_axis(i, order, axis=1)


def semantic_topk(
    src_emb: np.ndarray,
    tgt_emb: np.ndarray,
    cfg: NffConfig,
    rng_seed: int = 0,
) -> TopKSimilarityMatrix:
    """Exact Manhattan top-``phi`` targets per source row, computed over
    random segment pairs so only one ``segment x segment`` block of
    distances is alive at a time. Independent of ``cfg.segments``."""
    ns, nt = len(src_emb), len(tgt_emb)
    k = min(cfg.phi, nt)
    if ns == 0 or nt == 0:
        return TopKSimilarityMatrix.empty(ns, nt, max(k, 1))
    rng = np.random.default_rng(rng_seed)
    src_segs = np.array_split(rng.permutation(ns), cfg.segments)
    tgt_segs = [np.sort(s) for s in np.array_split(rng.permutation(nt), cfg.segments)]
    rows, cols, dists = [], [], []
    for s_idx in src_segs:
        if len(s_idx) == 0:
            continue
        best_d = np.full((len(s_idx), 0), np.inf)
        best_i = np.zeros((len(s_idx), 0), dtype=np.int64)
        for t_idx in tgt_segs:
            if len(t_idx) == 0:
                continue
            d = cdist(src_emb[s_idx], tgt_emb[t_idx], metric="cityblock")
            kk = min(k, len(t_idx))
            order = np.argsort(d, axis=1, kind="stable")[:, :kk]
            best_d, best_i = _merge_topk(
                best_d, best_i, np.take_along_axis(d, order, axis=1), t_idx[order], k
            )
        rows.append(np.repeat(s_idx, best_d.shape[1]))
        cols.append(best_i.ravel())
        dists.append(best_d.ravel())
    d = np.concatenate(dists)
    sim = distances_to_similarity(d, cfg.epsilon)
    return TopKSimilarityMatrix.from_entries(ns, nt, k, np.concatenate(rows), np.concatenate(cols), sim)


# ------------------------------------------------------------------ minhash


class MinHasher:
    """Universal hashing ``(a * x + b) mod p`` over one 64-bit base hash,
    with ``p = 2^61 - 1`` and seeded ``a, b``."""

    def __init__(self, perms: int = 128, seed: int = 1):
        rng = np.random.default_rng(seed)
        self.perms = perms
        self.a = [int(x) for x in rng.integers(1, MERSENNE_61, size=perms, dtype=np.int64)]
        self.b = [int(x) for x in rng.integers(0, MERSENNE_61, size=perms, dtype=np.int64)]
        self._token = lru_cache(maxsize=None)(self._token_hashes)

    def _token_hashes(self, token: str) -> np.ndarray:
        x = _hash64(token) % MERSENNE_61
        return np.array([(a * x + b) % MERSENNE_61 for a, b in zip(self.a, self.b)], dtype=np.uint64)

    def signature(self, tokens) -> np.ndarray:
        tokens = set(tokens)
        if not tokens:
            return np.full(self.perms, MERSENNE_61, dtype=np.uint64)
        return np.min(np.stack([self._token(t) for t in sorted(tokens)]), axis=0)


def minhash_signature(name: str, cfg: NffConfig, hasher: MinHasher | None = None) -> np.ndarray:
    hasher = hasher or MinHasher(cfg.minhash_perms, cfg.minhash_seed)
    return hasher.signature(tokenize(name))


def estimated_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> np.ndarray:
    return np.mean(sig_a == sig_b, axis=-1)


def optimal_bands(theta: float, perms: int, fp_weight: float = 0.1, fn_weight: float = 0.9) -> tuple[int, int]:
    """(bands, rows) with S-curve threshold within 0.05 of ``theta`` that
    minimises weighted false-positive / false-negative area. Recall is
    favoured because candidates are verified afterwards."""
    grid = np.linspace(0.0, 1.0, 2001)
    best, best_cost = None, np.inf
    for bands in range(1, perms + 1):
        for rows in range(1, perms // bands + 1):
            if abs((1.0 / bands) ** (1.0 / rows) - theta) > 0.05:
                continue
            p = 1.0 - (1.0 - grid**rows) ** bands
            fp = trapezoid(np.where(grid <= theta, p, 0.0), grid)
            fn = trapezoid(np.where(grid >= theta, 1.0 - p, 0.0), grid)
            cost = fp_weight * fp + fn_weight * fn
            if cost < best_cost:
                best, best_cost = (bands, rows), cost
    if best is None:
        raise ValueError(f"no banding of {perms} permutations reaches threshold {theta}")
    return best


def lsh_candidates(
    src_names: list[str],
    tgt_names: list[str],
    cfg: NffConfig,
    hasher: MinHasher | None = None,
) -> list[tuple[int, int]]:
    """Pairs whose band signatures collide and whose estimated Jaccard
    reaches ``theta``; sorted, deduplicated."""
    hasher = hasher or MinHasher(cfg.minhash_perms, cfg.minhash_seed)
    src_tok = [tokenize(n) for n in src_names]
    tgt_tok = [tokenize(n) for n in tgt_names]
    s_ok = np.array([i for i, t in enumerate(src_tok) if t], dtype=np.int64)
    t_ok = np.array([i for i, t in enumerate(tgt_tok) if t], dtype=np.int64)
    if len(s_ok) == 0 or len(t_ok) == 0:
        return []
    s_sig = np.stack([hasher.signature(src_tok[i]) for i in s_ok])
    t_sig = np.stack([hasher.signature(tgt_tok[i]) for i in t_ok])
    bands, rows = optimal_bands(cfg.theta, cfg.minhash_perms)
    keys = []
    n_s = len(s_ok)
    for b in range(bands):
        block = np.vstack([s_sig[:, b * rows : (b + 1) * rows], t_sig[:, b * rows : (b + 1) * rows]])
        _, bucket = np.unique(block, axis=0, return_inverse=True)
        bucket = bucket.ravel()
        b_s, b_t = bucket[:n_s], bucket[n_s:]
        order_t = np.argsort(b_t, kind="stable")
        sorted_t = b_t[order_t]
        lo = np.searchsorted(sorted_t, b_s, side="left")
        hi = np.searchsorted(sorted_t, b_s, side="right")
        counts = hi - lo
        if counts.sum() == 0:
            continue
        s_rep = np.repeat(np.arange(n_s), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        t_rep = order_t[np.repeat(lo, counts) + offsets]
        keys.append(s_rep * len(t_ok) + t_rep)
    if not keys:
        return []
    uniq = np.unique(np.concatenate(keys))
    si, ti = uniq // len(t_ok), uniq % len(t_ok)
    keep = estimated_jaccard(s_sig[si], t_sig[ti]) >= cfg.theta
    return list(zip(s_ok[si[keep]].tolist(), t_ok[ti[keep]].tolist()))


# -------------------------------------------------------------- levenshtein


def edit_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def levenshtein_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(a, b) / longest


def string_similarity_matrix(
    candidates: list[tuple[int, int]],
    src_names: list[str],
    tgt_names: list[str],
    k: int,
) -> TopKSimilarityMatrix:
    ns, nt = len(src_names), len(tgt_names)
    if not candidates:
        return TopKSimilarityMatrix.empty(ns, nt, k)
    rows, cols = zip(*candidates)
    scores = [levenshtein_similarity(src_names[s], tgt_names[t]) for s, t in candidates]
    return TopKSimilarityMatrix.from_entries(ns, nt, k, rows, cols, scores)


def nff_fuse(m_se: TopKSimilarityMatrix, m_st: TopKSimilarityMatrix, cfg: NffConfig) -> TopKSimilarityMatrix:
    return union_add([(m_se, 1.0), (m_st, cfg.gamma_fusion)], k=cfg.phi)


@dataclass
class NameChannel:
    semantic: TopKSimilarityMatrix
    string: TopKSimilarityMatrix
    fused: TopKSimilarityMatrix
    candidates: list[tuple[int, int]] = field(default_factory=list)


def name_channel(
    src_names: list[str],
    tgt_names: list[str],
    cfg: NffConfig,
    embedder: NameEmbedder | None = None,
    src_vectors: np.ndarray | None = None,
    tgt_vectors: np.ndarray | None = None,
    rng_seed: int = 0,
) -> NameChannel:
    """Full name pipeline. Precomputed entity vectors, when given, replace
    the token embedder for the semantic part."""
    if src_vectors is None or tgt_vectors is None:
        embedder = embedder or NameEmbedder("hash")
        src_vectors = embed_names(src_names, embedder, cfg.epsilon)
        tgt_vectors = embed_names(tgt_names, embedder, cfg.epsilon)
    m_se = semantic_topk(src_vectors, tgt_vectors, cfg, rng_seed)
    candidates = lsh_candidates(src_names, tgt_names, cfg)
    m_st = string_similarity_matrix(candidates, src_names, tgt_names, cfg.phi)
    return NameChannel(m_se, m_st, nff_fuse(m_se, m_st, cfg), candidates)

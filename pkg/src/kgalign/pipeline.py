"""Configuration and end-to-end orchestration."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .alignment import (
    EvaluationReport,
    augment_seeds,
    augmentation_precision,
    evaluate,
    fuse_channels,
    infer_alignment,
    write_mapping,
)
from .graph import AlignmentMapping, KnowledgeGraph, SeedAlignment, SeedKind
from .names import NameChannel, NameEmbedder, NffConfig, name_channel
from .partition import (
    CpsConfig,
    MiniBatch,
    OverlapConfig,
    edge_cut_rate,
    expand_overlap,
    metis_cps,
    seed_colocation_rate,
    vps,
)
from .partition.batches import assignment_of, write_assignment
from .simmatrix import TopKSimilarityMatrix
from .structure import (
    BatchEmbeddings,
    BatchGraph,
    GnnConfig,
    TripletConfig,
    read_embeddings,
    structure_similarity,
    train_batch,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "KGALIGN_WORKERS"
STRATEGIES = ("vps", "metis-cps")
ABLATIONS = (None, "name", "structure", "augmentation")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    source_triples: str | None = None
    target_triples: str | None = None
    train_seeds: str | None = None
    test_truth: str | None = None
    truth: str | None = None  # full ground truth, split by seed_ratio
    source_embeddings: str | None = None
    target_embeddings: str | None = None
    token_vectors: str | None = None
    output_dir: str | None = None

    K: int = 5
    seed_ratio: float = 0.2
    strategy: str = "metis-cps"
    unsupervised: bool = False
    ablate: str | None = None
    embedder: str = "hash"
    structure_k: int | None = None  # defaults to nff.phi
    rng_seed: int = 0
    workers: int = 1

    cps: CpsConfig = field(default_factory=CpsConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    nff: NffConfig = field(default_factory=NffConfig)
    overlap: OverlapConfig = field(default_factory=OverlapConfig)

    def validate(self) -> None:
        if not 0 < self.seed_ratio < 1:
            raise ValueError("seed_ratio must lie in (0, 1)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.ablate not in ABLATIONS:
            raise ValueError(f"ablate must be one of {ABLATIONS[1:]}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        self.cps.K = self.K
        for name in ("source_triples", "target_triples", "train_seeds", "test_truth", "truth",
                     "source_embeddings", "target_embeddings", "token_vectors"):
            path = getattr(self, name)
            if path is not None and not os.access(path, os.R_OK):
                raise ValueError(f"{name}: cannot read {path}")


# flat config key -> (section or None, attribute, type)
_KEYS: dict[str, tuple[str | None, str, type]] = {
    "source_triples": (None, "source_triples", str),
    "target_triples": (None, "target_triples", str),
    "train_seeds": (None, "train_seeds", str),
    "test_truth": (None, "test_truth", str),
    "truth": (None, "truth", str),
    "source_embeddings": (None, "source_embeddings", str),
    "target_embeddings": (None, "target_embeddings", str),
    "token_vectors": (None, "token_vectors", str),
    "output_dir": (None, "output_dir", str),
    "k": (None, "K", int),
    "seed_ratio": (None, "seed_ratio", float),
    "strategy": (None, "strategy", str),
    "unsupervised": (None, "unsupervised", bool),
    "ablate": (None, "ablate", str),
    "embedder": (None, "embedder", str),
    "structure_k": (None, "structure_k", int),
    "seed": (None, "rng_seed", int),
    "workers": (None, "workers", int),
    "w_prime": ("cps", "w_prime", float),
    "q": ("cps", "q", int),
    "imbalance": ("cps", "imbalance", float),
    "d_ov": ("overlap", "d_ov", int),
    "layers": ("gnn", "layers", int),
    "dim": ("gnn", "dim", int),
    "activation": ("gnn", "activation", str),
    "margin": ("triplet", "margin", float),
    "negatives": ("triplet", "negatives_per_pair", int),
    "epochs": ("triplet", "epochs", int),
    "learning_rate": ("triplet", "learning_rate", float),
    "gamma_fusion": ("nff", "gamma_fusion", float),
    "theta": ("nff", "theta", float),
    "phi": ("nff", "phi", int),
    "segments": ("nff", "segments", int),
    "minhash_perms": ("nff", "minhash_perms", int),
}


def _coerce(value, kind: type):
    if isinstance(value, str) and value.strip().lower() in ("", "none"):
        return None
    if value is None or isinstance(value, kind):
        return value
    if kind is bool:
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    return kind(value)


def apply_settings(cfg: PipelineConfig, settings: dict) -> PipelineConfig:
    for raw_key, value in settings.items():
        key = raw_key.strip().lower().replace("-", "_")
        if key not in _KEYS:
            raise ValueError(f"unknown config key {raw_key!r}")
        section, attr, kind = _KEYS[key]
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, attr, _coerce(value, kind))
    return cfg


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def config_settings(cfg: PipelineConfig) -> dict:
    """Flat view of ``cfg`` (inverse of :func:`apply_settings`)."""
    out = {}
    for key, (section, attr, _) in _KEYS.items():
        target = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(target, attr)
    return out


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    n = int(env) if env else (requested or 1)
    return max(1, n)


def _derived_seed(base: int, *path: int) -> int:
    return int(np.random.SeedSequence([base, *path]).generate_state(1)[0])


@dataclass
class PipelineResult:
    mapping: AlignmentMapping
    report: EvaluationReport
    matrix: TopKSimilarityMatrix
    structure: TopKSimilarityMatrix | None = None
    names: NameChannel | None = None
    batches: list[MiniBatch] = field(default_factory=list)
    seeds: SeedAlignment | None = None
    pseudo_seeds: SeedAlignment | None = None
    timings: dict[str, float] = field(default_factory=dict)


def check_block_diagonal(m_s: TopKSimilarityMatrix, batches: list[MiniBatch]) -> None:
    """Every stored entry joins a scored source with a target of the same
    batch; storage stays within ``k`` per source."""
    rows, cols, _ = m_s.entries()
    owner = np.full(m_s.n_source, -1, dtype=np.int64)
    ok = np.zeros(len(rows), dtype=bool)
    for i, b in enumerate(batches):
        owner[b.scored_sources] = i
    for i, b in enumerate(batches):
        in_batch = owner[rows] == i
        ok[in_batch] = np.isin(cols[in_batch], b.target_entities)
    if not ok.all():
        raise AssertionError(f"{np.count_nonzero(~ok)} structure entries cross batch boundaries")
    if m_s.nnz > m_s.k * m_s.n_source:
        raise AssertionError("structure matrix exceeds k entries per source")


def make_batches(
    g_s: KnowledgeGraph, g_t: KnowledgeGraph, seeds: SeedAlignment, cfg: PipelineConfig
) -> list[MiniBatch]:
    seed = _derived_seed(cfg.rng_seed, 1)
    if cfg.strategy == "vps":
        batches = vps(g_s, g_t, seeds, cfg.K, seed)
    else:
        cps = dataclasses.replace(cfg.cps, K=cfg.K)
        batches = metis_cps(g_s, g_t, seeds, cps, seed)
    if cfg.overlap.d_ov > 1:
        batches = expand_overlap(batches, seeds, cfg.overlap, g_s.num_entities, g_t.num_entities)
    return batches


def train_batches(
    g_s: KnowledgeGraph,
    g_t: KnowledgeGraph,
    batches: list[MiniBatch],
    cfg: PipelineConfig,
) -> list[BatchEmbeddings]:
    def work(batch: MiniBatch) -> BatchEmbeddings:
        graph = BatchGraph.from_batch(batch, g_s, g_t)
        return train_batch(graph, cfg.gnn, cfg.triplet, _derived_seed(cfg.rng_seed, 2, batch.index))

    workers = worker_count(cfg.workers)
    if workers == 1 or len(batches) == 1:
        return [work(b) for b in batches]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, batches))


def _entity_vectors(path, g: KnowledgeGraph) -> np.ndarray:
    vectors, labels = read_embeddings(path)
    if not labels:
        if len(vectors) != g.num_entities:
            raise ValueError(f"{path}: {len(vectors)} rows for {g.num_entities} entities")
        return vectors
    index = {label: i for i, label in enumerate(labels)}
    missing = [lab for lab in g.entities.labels if lab not in index]
    if missing:
        raise ValueError(f"{path}: no vector for {len(missing)} entities, e.g. {missing[0]!r}")
    return vectors[[index[lab] for lab in g.entities.labels]]


def compute_name_channel(g_s: KnowledgeGraph, g_t: KnowledgeGraph, cfg: PipelineConfig) -> NameChannel:
    src_vec = tgt_vec = None
    embedder = None
    if cfg.source_embeddings and cfg.target_embeddings:
        src_vec = _entity_vectors(cfg.source_embeddings, g_s)
        tgt_vec = _entity_vectors(cfg.target_embeddings, g_t)
    elif cfg.embedder == "file":
        if not cfg.token_vectors:
            raise ValueError("embedder 'file' needs token_vectors or entity embedding files")
        embedder = NameEmbedder.from_file(cfg.token_vectors)
    else:
        embedder = NameEmbedder("hash")
    return name_channel(
        g_s.names(), g_t.names(), cfg.nff, embedder, src_vec, tgt_vec,
        rng_seed=_derived_seed(cfg.rng_seed, 3),
    )


def align(
    g_s: KnowledgeGraph,
    g_t: KnowledgeGraph,
    train: SeedAlignment,
    test: SeedAlignment | None,
    cfg: PipelineConfig,
    names: NameChannel | None = None,
) -> PipelineResult:
    """Name channel -> augmentation -> batches -> training -> fusion -> eval.

    ``names`` reuses a previously computed name channel (same graphs and
    name config) instead of recomputing it.
    """
    timings: dict[str, float] = {}
    stage = "setup"

    def tick(name: str, start: float) -> None:
        timings[name] = time.perf_counter() - start

    try:
        known = train
        train.validate(g_s, g_t)
        if cfg.unsupervised:
            train = SeedAlignment(kind=SeedKind.TRAIN)
        use_names = cfg.ablate != "name"
        use_structure = cfg.ablate != "structure"

        m_n = pseudo = None
        if use_names:
            stage = "name-sim"
            t0 = time.perf_counter()
            if names is None:
                names = compute_name_channel(g_s, g_t, cfg)
            m_n = names.fused
            tick("name-sim", t0)

        seeds = train
        if use_names and cfg.ablate != "augmentation":
            stage = "augment"
            t0 = time.perf_counter()
            pseudo = augment_seeds(m_n, train)
            seeds = train.union(pseudo)
            tick("augment", t0)

        m_s = None
        batches: list[MiniBatch] = []
        if use_structure:
            stage = "partition"
            t0 = time.perf_counter()
            batches = make_batches(g_s, g_t, seeds, cfg)
            tick("partition", t0)

            stage = "train"
            t0 = time.perf_counter()
            embs = train_batches(g_s, g_t, batches, cfg)
            k = cfg.structure_k or cfg.nff.phi
            m_s = structure_similarity(batches, embs, k, g_s.num_entities, g_t.num_entities)
            check_block_diagonal(m_s, batches)
            tick("train", t0)

        stage = "fuse"
        if m_s is not None and m_n is not None:
            m = fuse_channels(m_s, m_n)
        else:
            m = m_s if m_s is not None else m_n

        stage = "eval"
        mapping = infer_alignment(m)
        if test is not None and len(test):
            report = evaluate(m, test)
        else:
            report = EvaluationReport({}, 0.0, 0)
        extra = report.extra
        extra["train_seeds"] = float(len(train))
        extra["structure_seeds"] = float(len(seeds))
        if pseudo is not None:
            extra["pseudo_seeds"] = float(len(pseudo))
            if test is not None and len(pseudo):
                full = known.union(test) if len(known) else test
                extra["augmentation_precision"] = augmentation_precision(pseudo, full)
        if batches:
            if test is not None and len(test):
                report.co_location_rate = seed_colocation_rate(batches, test)
            if len(seeds):
                extra["train_co_location_rate"] = seed_colocation_rate(batches, seeds)
            if cfg.overlap.d_ov == 1:
                src_of, tgt_of = assignment_of(batches, g_s.num_entities, g_t.num_entities)
                report.edge_cut_rate = edge_cut_rate(g_s, src_of)
                extra["target_edge_cut_rate"] = edge_cut_rate(g_t, tgt_of)
        return PipelineResult(mapping, report, m, m_s, names, batches, seeds, pseudo, timings)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(stage, exc) from exc


@dataclass
class Inputs:
    source: KnowledgeGraph
    target: KnowledgeGraph
    train: SeedAlignment
    test: SeedAlignment | None


def load_inputs(cfg: PipelineConfig) -> Inputs:
    stage = "load"
    try:
        if not cfg.source_triples or not cfg.target_triples:
            raise ValueError("source_triples and target_triples are required")
        g_s = io.load_graph(cfg.source_triples)
        g_t = io.load_graph(cfg.target_triples)
        train = test = None
        if cfg.train_seeds:
            train = io.read_pairs(cfg.train_seeds, g_s, g_t, SeedKind.TRAIN)
        if cfg.test_truth:
            test = io.read_pairs(cfg.test_truth, g_s, g_t, SeedKind.TRUTH)
        if cfg.truth and (train is None or test is None):
            full = io.read_pairs(cfg.truth, g_s, g_t, SeedKind.TRUTH)
            split_train, split_test = full.split(cfg.seed_ratio, np.random.default_rng(cfg.rng_seed))
            train = train if train is not None else split_train
            test = test if test is not None else split_test
        if train is None:
            if not cfg.unsupervised:
                raise ValueError("supervised runs need train_seeds or truth")
            train = SeedAlignment(kind=SeedKind.TRAIN)
        return Inputs(g_s, g_t, train, test)
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, exc) from exc


def report_json(result: PipelineResult, cfg: PipelineConfig) -> str:
    # where and how wide the run executed does not change its results
    settings = {k: v for k, v in config_settings(cfg).items() if k not in ("output_dir", "workers")}
    body = {"metrics": result.report.to_dict(), "config": settings}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_outputs(result: PipelineResult, inputs: Inputs, cfg: PipelineConfig, out_dir) -> dict[str, Path]:
    out = io.ensure_dir(out_dir)
    paths = {
        "alignment": out / "alignment.tsv",
        "report": out / "report.json",
        "batches": out / "batches.tsv",
    }
    src_labels, tgt_labels = inputs.source.entities.labels, inputs.target.entities.labels
    write_mapping(paths["alignment"], result.mapping, src_labels, tgt_labels)
    paths["report"].write_text(report_json(result, cfg), encoding="utf-8")
    if result.batches:
        write_assignment(paths["batches"], result.batches, inputs.source, inputs.target)
    else:
        paths.pop("batches")
    if result.pseudo_seeds is not None:
        paths["pseudo_seeds"] = out / "pseudo_seeds.tsv"
        io.write_pairs(paths["pseudo_seeds"], result.pseudo_seeds, inputs.source, inputs.target)
    return paths


def run_pipeline(cfg: PipelineConfig) -> tuple[AlignmentMapping, EvaluationReport]:
    try:
        cfg.validate()
    except Exception as exc:  # noqa: BLE001
        raise StageError("config", exc) from exc
    inputs = load_inputs(cfg)
    result = align(inputs.source, inputs.target, inputs.train, inputs.test, cfg)
    for name, secs in result.timings.items():
        log.info("stage %s took %.2fs", name, secs)
    if cfg.output_dir:
        try:
            write_outputs(result, inputs, cfg, cfg.output_dir)
        except Exception as exc:  # noqa: BLE001
            raise StageError("write", exc) from exc
    return result.mapping, result.report

"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .alignment import (
    augment_seeds,
    evaluate,
    fuse_channels,
    infer_alignment,
    write_mapping,
)
from .graph import SeedAlignment, SeedKind
from .names import NffConfig
from .partition import CpsConfig, OverlapConfig, edge_cut_rate, expand_overlap, seed_colocation_rate
from .partition.batches import assignment_of, read_assignment, write_assignment
from .pipeline import (
    _KEYS,
    PipelineConfig,
    StageError,
    apply_settings,
    check_block_diagonal,
    compute_name_channel,
    make_batches,
    read_config,
    run_pipeline,
    train_batches,
)
from .simmatrix import read_matrix, write_matrix
from .structure import GnnConfig, TripletConfig, structure_similarity, write_embeddings
from .synthetic import SyntheticSpec, generate_synthetic_benchmark

log = logging.getLogger("kgalign")

CORE_SUFFIX = ".core"


def _graphs(args):
    return io.load_graph(args.source), io.load_graph(args.target)


def _seeds(path, g_s, g_t, kind=SeedKind.TRAIN) -> SeedAlignment:
    if not path:
        return SeedAlignment(kind=kind)
    return io.read_pairs(path, g_s, g_t, kind)


def _load_seed_files(paths, g_s, g_t) -> SeedAlignment:
    seeds = SeedAlignment(kind=SeedKind.TRAIN)
    for path in paths or ():
        seeds = seeds.union(_seeds(path, g_s, g_t))
    return seeds


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_gen_bench(args) -> None:
    spec = SyntheticSpec(
        entities_per_side=args.entities,
        avg_degree=args.avg_degree,
        community_count=args.communities,
        name_noise=args.name_noise,
        structure_noise=args.structure_noise,
        unknown_entity_ratio=args.unknown_ratio,
        min_anchor=args.min_anchor,
        rng_seed=args.seed,
    )
    spec.validate()
    bench = generate_synthetic_benchmark(spec)
    out = io.ensure_dir(args.out)
    io.write_triples(out / "source.tsv", bench.source.labelled_triples())
    io.write_triples(out / "target.tsv", bench.target.labelled_triples())
    io.write_pairs(out / "truth.tsv", bench.truth, bench.source, bench.target)
    train, test = bench.truth.split(args.seed_ratio, np.random.default_rng(args.seed))
    io.write_pairs(out / "train.tsv", train, bench.source, bench.target)
    io.write_pairs(out / "test.tsv", test, bench.source, bench.target)
    print(f"wrote {out}: {bench.source.num_entities} + {bench.target.num_entities} entities, "
          f"{len(train)} train / {len(test)} test pairs")


def cmd_partition(args) -> None:
    g_s, g_t = _graphs(args)
    seeds = _load_seed_files(args.seeds, g_s, g_t)
    cfg = PipelineConfig(
        K=args.k,
        strategy=args.strategy,
        rng_seed=args.seed,
        cps=CpsConfig(args.k, args.w_prime, args.q, args.imbalance),
        overlap=OverlapConfig(1),
    )
    core = make_batches(g_s, g_t, seeds, cfg)
    batches = core
    if args.d_ov > 1:
        batches = expand_overlap(core, seeds, OverlapConfig(args.d_ov), g_s.num_entities, g_t.num_entities)
        write_assignment(str(args.out) + CORE_SUFFIX, core, g_s, g_t)
    write_assignment(args.out, batches, g_s, g_t)
    src_of, tgt_of = assignment_of(core, g_s.num_entities, g_t.num_entities)
    stats = {
        "batches": len(batches),
        "source_edge_cut_rate": edge_cut_rate(g_s, src_of),
        "target_edge_cut_rate": edge_cut_rate(g_t, tgt_of),
    }
    if len(seeds):
        stats["seed_co_location_rate"] = seed_colocation_rate(batches, seeds)
    if args.truth:
        stats["truth_co_location_rate"] = seed_colocation_rate(
            batches, _seeds(args.truth, g_s, g_t, SeedKind.TRUTH)
        )
    _write_json(stats, None)


def _nff(args) -> NffConfig:
    return NffConfig(
        gamma_fusion=args.gamma_fusion,
        theta=args.theta,
        phi=args.phi,
        segments=args.segments,
        minhash_perms=args.minhash_perms,
    )


def cmd_name_sim(args) -> None:
    g_s, g_t = _graphs(args)
    cfg = PipelineConfig(
        embedder=args.embedder,
        token_vectors=args.token_vectors,
        source_embeddings=args.source_embeddings,
        target_embeddings=args.target_embeddings,
        nff=_nff(args),
        rng_seed=args.seed,
    )
    channel = compute_name_channel(g_s, g_t, cfg)
    write_matrix(args.out, channel.fused, g_s.entities.labels, g_t.entities.labels)
    print(f"wrote {args.out}: {channel.fused.nnz} entries, {len(channel.candidates)} string candidates")


def cmd_augment(args) -> None:
    g_s, g_t = _graphs(args)
    m_n = read_matrix(args.name_sim, g_s.entities, g_t.entities)
    existing = _load_seed_files(args.seeds, g_s, g_t)
    pseudo = augment_seeds(m_n, existing)
    io.write_pairs(args.out, pseudo, g_s, g_t)
    print(f"wrote {args.out}: {len(pseudo)} pseudo seeds")


def _restore_cores(batches, path, g_s, g_t):
    core_path = Path(str(path) + CORE_SUFFIX)
    if not core_path.exists():
        return batches
    cores = {b.index: b.source_entities for b in read_assignment(core_path, g_s, g_t)}
    for b in batches:
        b.core_sources = cores.get(b.index, np.empty(0, dtype=np.int64))
    return batches


def cmd_train(args) -> None:
    g_s, g_t = _graphs(args)
    seeds = _load_seed_files(args.seeds, g_s, g_t)
    batches = _restore_cores(read_assignment(args.batches, g_s, g_t, seeds), args.batches, g_s, g_t)
    cfg = PipelineConfig(
        rng_seed=args.seed,
        workers=args.workers,
        gnn=GnnConfig(args.layers, args.dim, args.activation),
        triplet=TripletConfig(args.margin, args.negatives, args.epochs, args.learning_rate),
    )
    embs = train_batches(g_s, g_t, batches, cfg)
    out = io.ensure_dir(args.out)
    src_labels, tgt_labels = g_s.entities.labels, g_t.entities.labels
    for b, e in zip(batches, embs):
        write_embeddings(out / f"batch{b.index}.source.emb", e.source.vectors, [src_labels[i] for i in e.source.ids])
        write_embeddings(out / f"batch{b.index}.target.emb", e.target.vectors, [tgt_labels[i] for i in e.target.ids])
    m_s = structure_similarity(batches, embs, args.topk, g_s.num_entities, g_t.num_entities)
    check_block_diagonal(m_s, batches)
    write_matrix(out / "structure.tsv", m_s, src_labels, tgt_labels)
    print(f"wrote {out}: {len(batches)} batches, {m_s.nnz} structure entries")


def cmd_fuse(args) -> None:
    g_s, g_t = _graphs(args)
    m_s = read_matrix(args.structure_sim, g_s.entities, g_t.entities)
    m_n = read_matrix(args.name_sim, g_s.entities, g_t.entities)
    m = fuse_channels(m_s, m_n)
    write_matrix(args.out, m, g_s.entities.labels, g_t.entities.labels)
    if args.alignment:
        write_mapping(args.alignment, infer_alignment(m), g_s.entities.labels, g_t.entities.labels)
    print(f"wrote {args.out}: {m.nnz} entries")


def cmd_eval(args) -> None:
    g_s, g_t = _graphs(args)
    m = read_matrix(args.matrix, g_s.entities, g_t.entities)
    truth = _seeds(args.truth, g_s, g_t, SeedKind.TRUTH)
    ns = tuple(int(n) for n in args.hits.split(","))
    _write_json(evaluate(m, truth, ns).to_dict(), args.out)


def cmd_run(args) -> None:
    cfg = PipelineConfig()
    if args.config:
        apply_settings(cfg, read_config(args.config))
    overrides = {
        key: getattr(args, key)
        for key in _KEYS
        if getattr(args, key, None) is not None
    }
    apply_settings(cfg, overrides)
    _, report = run_pipeline(cfg)
    _write_json(report.to_dict(), None)


def _add_graph_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", required=True, help="source triples (head<TAB>relation<TAB>tail)")
    p.add_argument("--target", required=True, help="target triples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgalign", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bench", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=1000)
    p.add_argument("--avg-degree", type=float, default=8.0)
    p.add_argument("--communities", type=int, default=10)
    p.add_argument("--name-noise", type=float, default=0.0)
    p.add_argument("--structure-noise", type=float, default=0.0)
    p.add_argument("--unknown-ratio", type=float, default=0.0)
    p.add_argument("--min-anchor", type=int, default=5)
    p.add_argument("--seed-ratio", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_bench, stage="gen-bench")

    p = sub.add_parser("partition", help="split both graphs into mini-batches")
    _add_graph_args(p)
    p.add_argument("--seeds", action="append", help="seed pair file (repeatable)")
    p.add_argument("--truth", help="pairs to report co-location for")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("vps", "metis-cps"), default="metis-cps")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--w-prime", type=float, default=1000.0)
    p.add_argument("--q", type=int, default=1)
    p.add_argument("--d-ov", type=int, default=1)
    p.add_argument("--imbalance", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_partition, stage="partition")

    defaults = NffConfig()
    p = sub.add_parser("name-sim", help="fused name similarity matrix")
    _add_graph_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float, default=defaults.theta)
    p.add_argument("--phi", type=int, default=defaults.phi)
    p.add_argument("--gamma-fusion", type=float, default=defaults.gamma_fusion)
    p.add_argument("--segments", type=int, default=defaults.segments)
    p.add_argument("--minhash-perms", type=int, default=defaults.minhash_perms)
    p.add_argument("--embedder", choices=("file", "hash"), default="hash")
    p.add_argument("--token-vectors", help="token<TAB>f1 f2 ... file for --embedder file")
    p.add_argument("--source-embeddings", help="entity embedding checkpoint (source)")
    p.add_argument("--target-embeddings", help="entity embedding checkpoint (target)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_name_sim, stage="name-sim")

    p = sub.add_parser("augment", help="pseudo seeds from mutual best name matches")
    _add_graph_args(p)
    p.add_argument("--name-sim", required=True)
    p.add_argument("--seeds", action="append", help="provided seeds; they win on conflict")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment, stage="augment")

    gnn, trip = GnnConfig(), TripletConfig()
    p = sub.add_parser("train", help="train every batch and write the structure matrix")
    _add_graph_args(p)
    p.add_argument("--batches", required=True, help="assignment file from `partition`")
    p.add_argument("--seeds", action="append", help="seed pair file (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layers", type=int, default=gnn.layers)
    p.add_argument("--dim", type=int, default=gnn.dim)
    p.add_argument("--activation", choices=("tanh", "linear"), default=gnn.activation)
    p.add_argument("--margin", type=float, default=trip.margin)
    p.add_argument("--negatives", type=int, default=trip.negatives_per_pair)
    p.add_argument("--epochs", type=int, default=trip.epochs)
    p.add_argument("--learning-rate", type=float, default=trip.learning_rate)
    p.add_argument("--topk", type=int, default=defaults.phi)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train, stage="train")

    p = sub.add_parser("fuse", help="add structure and name matrices")
    _add_graph_args(p)
    p.add_argument("--structure-sim", required=True)
    p.add_argument("--name-sim", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alignment", help="also write the row-wise best match")
    p.set_defaults(func=cmd_fuse, stage="fuse")

    p = sub.add_parser("eval", help="Hits@N and MRR of a matrix against truth")
    _add_graph_args(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--hits", default="1,5,10")
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_eval, stage="eval")

    p = sub.add_parser("run", help="end-to-end alignment")
    p.add_argument("--config", help="flat key = value file; flags override it")
    for key, (_, _, kind) in _KEYS.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
        elif key == "ablate":
            p.add_argument(flag, dest=key, choices=("name", "structure", "augmentation"))
        elif key == "strategy":
            p.add_argument(flag, dest=key, choices=("vps", "metis-cps"))
        else:
            p.add_argument(flag, dest=key, type=kind, default=None)
    p.set_defaults(func=cmd_run, stage="run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except StageError as exc:
        print(f"kgalign: error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported with the stage tag
        print(f"kgalign: error [{args.stage}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

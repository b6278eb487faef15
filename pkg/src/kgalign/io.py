"""Tab-separated triples and pair files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import KnowledgeGraph, SeedAlignment, SeedKind, build_graph


def _rows(path, width: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} tab-separated fields, got {len(fields)}")
            yield fields


def read_triples(path) -> list[tuple[str, str, str]]:
    return [tuple(f) for f in _rows(path, 3)]


def load_graph(path) -> KnowledgeGraph:
    return build_graph(read_triples(path))


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def read_pairs(path, g_s: KnowledgeGraph, g_t: KnowledgeGraph, kind: SeedKind = SeedKind.TRAIN) -> SeedAlignment:
    """Pairs whose labels are unknown to either graph raise ``KeyError``."""
    pairs = []
    for s, t in _rows(path, 2):
        try:
            pairs.append((g_s.entities.id(s), g_t.entities.id(t)))
        except KeyError as exc:
            raise KeyError(f"{path}: unknown entity label {exc.args[0]!r}") from None
    return SeedAlignment(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), kind)


def write_pairs(path, seeds: SeedAlignment, g_s: KnowledgeGraph, g_t: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in seeds:
            fh.write(f"{g_s.entities.label(s)}\t{g_t.entities.label(t)}\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p

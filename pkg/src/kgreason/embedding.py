"""Embedding index: embed every entity and relation once, persist the
vectors, and answer exact top-m cosine queries.

Search is exact (full scan plus sort), which is both affordable and easy to
verify at the graph sizes this project targets. Approximate structures are a
non-goal.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .kg import KnowledgeGraph

logger = logging.getLogger(__name__)

INDEX_FORMAT = "kgreason-index/1"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmbedderError(RuntimeError):
    """Raised when an embedder fails on a specific item."""

    def __init__(self, identifier: str, cause: Exception):
        super().__init__(f"embedding failed for {identifier!r}: {cause}")
        self.identifier = identifier


class Embedder(Protocol):
    """Text-to-vector capability. Must be deterministic per fingerprint."""

    fingerprint: str

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic token-level feature hashing, L2-normalized.

    Ships so the whole pipeline runs with zero network access. Tokens are
    lowercased alphanumeric runs; each token is hashed (blake2b, unsalted)
    to a bucket and a sign. Identical text always yields identical vectors.
    """

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.fingerprint = f"hashing-embedder/1 d={dimension}"

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            bucket = value % self.dimension
            sign = 1.0 if (value >> 63) & 1 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1].

    A zero-norm operand scores 0 (with a warning) rather than erroring, so a
    degenerate embedder output cannot abort a batch run.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        logger.warning("cosine of a zero-norm vector defined as 0.0")
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class EmbeddingIndex:
    """One vector per entity and per relation of a single graph.

    Immutable after build; queries are thread-safe.
    """

    dimension: int
    fingerprint: str
    entity_vectors: dict[str, np.ndarray] = field(default_factory=dict)
    relation_vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def entity_vector(self, identifier: str) -> np.ndarray | None:
        return self.entity_vectors.get(identifier)

    def relation_vector(self, identifier: str) -> np.ndarray | None:
        return self.relation_vectors.get(identifier)


def build_index(g: KnowledgeGraph, emb: Embedder) -> EmbeddingIndex:
    """Embed every entity and relation of ``g`` with ``emb``.

    An embedder failure aborts the build and names the failing identifier.
    """
    if not g.entities and not g.relations:
        raise ValueError("cannot index an empty graph")
    index = EmbeddingIndex(dimension=0, fingerprint=emb.fingerprint)
    dimension = None
    for identifier in sorted(g.entities):
        vec = _embed_item(emb, identifier)
        dimension = _check_dim(dimension, vec, identifier)
        index.entity_vectors[identifier] = vec
    for identifier in sorted(g.relations):
        vec = _embed_item(emb, identifier)
        dimension = _check_dim(dimension, vec, identifier)
        index.relation_vectors[identifier] = vec
    index.dimension = int(dimension) if dimension is not None else 0
    return index


def _embed_item(emb: Embedder, identifier: str) -> np.ndarray:
    try:
        vec = np.asarray(emb.embed(identifier), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - abort with the failing item
        raise EmbedderError(identifier, exc) from exc
    if not np.all(np.isfinite(vec)):
        raise EmbedderError(identifier, ValueError("non-finite components"))
    return vec

def _check_dim(dimension: int | None, vec: np.ndarray, identifier: str) -> int:
    if vec.ndim != 1:
        raise EmbedderError(identifier, ValueError("vector must be 1-d"))
    if dimension is not None and vec.shape[0] != dimension:
        raise EmbedderError(
            identifier, ValueError(f"dimension {vec.shape[0]} != index dimension {dimension}")
        )
    return vec.shape[0]


def _rank(vectors: dict[str, np.ndarray], query: np.ndarray, m: int) -> list[tuple[str, float]]:
    if m < 1:
        raise ValueError("m must be >= 1")
    scored = [(identifier, cosine(query, vec)) for identifier, vec in vectors.items()]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:m]


def top_m_entities(idx: EmbeddingIndex, query: np.ndarray, m: int) -> list[tuple[str, float]]:
    """The m entities with highest cosine to ``query``, score-descending.

    Ties break by ascending identifier; fewer than m entities returns all.
    """
    return _rank(idx.entity_vectors, query, m)


def top_m_relations(idx: EmbeddingIndex, query: np.ndarray, m: int) -> list[tuple[str, float]]:
    """As :func:`top_m_entities`, over the relation vocabulary."""
    return _rank(idx.relation_vectors, query, m)


def save_index(idx: EmbeddingIndex, path: str | Path) -> None:
    """Write a line-oriented, versioned index file (bit-exact round trip)."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in _index_lines(idx):
            fh.write(line + "\n")


def _index_lines(idx: EmbeddingIndex) -> Iterable[str]:
    header = {
        "format": INDEX_FORMAT,
        "fingerprint": idx.fingerprint,
        "dimension": idx.dimension,
        "entities": len(idx.entity_vectors),
        "relations": len(idx.relation_vectors),
    }
    yield json.dumps(header, sort_keys=True)
    for kind, vectors in (("entity", idx.entity_vectors), ("relation", idx.relation_vectors)):
        for identifier in sorted(vectors):
            record = {"kind": kind, "id": identifier, "vec": vectors[identifier].tolist()}
            yield json.dumps(record, sort_keys=True)


def load_index(path: str | Path) -> EmbeddingIndex:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise ValueError(f"empty index file: {path}")
        header = json.loads(header_line)
        if header.get("format") != INDEX_FORMAT:
            raise ValueError(f"unsupported index format: {header.get('format')!r}")
        idx = EmbeddingIndex(dimension=header["dimension"], fingerprint=header["fingerprint"])
        for line in fh:
            record = json.loads(line)
            vec = np.asarray(record["vec"], dtype=np.float64)
            if record["kind"] == "entity":
                idx.entity_vectors[record["id"]] = vec
            elif record["kind"] == "relation":
                idx.relation_vectors[record["id"]] = vec
            else:
                raise ValueError(f"unknown record kind: {record['kind']!r}")
    return idx

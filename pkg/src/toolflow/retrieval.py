"""Embedding backends, similarity index, and top-k retrieval with exclusions.

The bundled backend is a deterministic feature-hashed term-frequency encoder;
remote embedding services plug in through the same interface. Retrieval keys
are a function's signature line plus its documentation, not the body.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import BackendFailure, DimensionMismatch, StaleIndex
from .toolset import Toolset

QUERY_SEPARATOR = "\n"
DEFAULT_K = 3
DEFAULT_DIMENSION = 512


class EmbeddingBackend(Protocol):
    """Deterministic text-to-vector encoder."""

    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def _tokens(text: str) -> list[str]:
    out: list[str] = []
    word: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


class HashedTfEmbedder:
    """Feature-hashed term-frequency vectors over lowercased alphanumeric tokens.

    Token buckets come from a keyed blake2b hash, so vectors are identical
    across processes and platforms. Output is L2-normalized.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.name = f"hashed-tf-{dimension}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in _tokens(text):
            vec[self._bucket(token)] += 1.0
        norm = math.sqrt(float(np.sum(vec * vec)))
        if norm > 0:
            vec /= norm
        return vec.astype(np.float32)


@dataclass(frozen=True)
class Query:
    """Retrieval query text: the question, optionally enriched with planning."""

    question_text: str
    planning_text: str | None = None

    def render(self) -> str:
        if self.planning_text:
            return f"{self.question_text}{QUERY_SEPARATOR}{self.planning_text}"
        return self.question_text


@dataclass(frozen=True)
class RetrievalIndex:
    """Unit-normalized key vectors, one per toolset function."""

    toolset_version: str
    backend_name: str
    dimension: int
    entries: tuple[tuple[str, np.ndarray], ...]

    def __len__(self) -> int:
        return len(self.entries)


def key_text(fn) -> str:
    """Index key for a function: signature line + documentation, no body."""
    return f"{fn.signature}\n{fn.doc}"


def build_index(toolset: Toolset, backend: EmbeddingBackend) -> RetrievalIndex:
    """Embed every function's key text into a similarity index.

    Vectors are validated for dimension and normalized to unit length; a
    backend failure aborts the whole build and names the offending function.
    """
    entries: list[tuple[str, np.ndarray]] = []
    for fn in toolset:
        try:
            vec = np.asarray(backend.embed(key_text(fn)), dtype=np.float32)
        except Exception as exc:
            raise BackendFailure(f"embedding failed for {fn.id}: {exc}") from exc
        if vec.shape != (backend.dimension,):
            raise DimensionMismatch(
                f"{fn.id}: backend returned shape {vec.shape}, expected ({backend.dimension},)"
            )
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if norm > 0 and abs(norm - 1.0) > 1e-6:
            vec = (vec.astype(np.float64) / norm).astype(np.float32)
        entries.append((fn.id, vec))
    return RetrievalIndex(
        toolset_version=toolset.version,
        backend_name=backend.name,
        dimension=backend.dimension,
        entries=tuple(entries),
    )


def check_fresh(index: RetrievalIndex, toolset: Toolset) -> None:
    if index.toolset_version != toolset.version:
        raise StaleIndex(
            f"index built for toolset {index.toolset_version}, live toolset is {toolset.version}"
        )


def retrieve(
    index: RetrievalIndex,
    query: Query,
    backend: EmbeddingBackend,
    k: int = DEFAULT_K,
    excluded: Iterable[str] = (),
    toolset: Toolset | None = None,
) -> list[tuple[str, float]]:
    """Top-k functions by cosine similarity, excluded ids removed.

    Returns min(k, available) (id, score) pairs sorted by descending score,
    ties broken by ascending id. Pure and deterministic.
    """
    if toolset is not None:
        check_fresh(index, toolset)
    if k < 0:
        raise ValueError("k must be non-negative")
    excluded_set = frozenset(excluded)
    if k == 0 or not index.entries:
        return []
    qvec = np.asarray(backend.embed(query.render()), dtype=np.float64)
    if qvec.shape != (index.dimension,):
        raise DimensionMismatch(
            f"query embedding has shape {qvec.shape}, expected ({index.dimension},)"
        )
    candidates = [(fid, vec) for fid, vec in index.entries if fid not in excluded_set]
    if not candidates:
        return []
    matrix = np.stack([vec.astype(np.float64) for _, vec in candidates])
    scores = (matrix * qvec).sum(axis=1)
    ranked = sorted(
        ((fid, float(score)) for (fid, _), score in zip(candidates, scores)),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def recall_at_k(results: Sequence[str], gold: Iterable[str], k: int) -> float:
    """|gold ∩ top-k| / |gold|; 1.0 when gold is empty."""
    if k <= 0:
        raise ValueError("k must be positive")
    gold_set = set(gold)
    if not gold_set:
        return 1.0
    top = set(results[:k])
    return len(gold_set & top) / len(gold_set)


def hit_at_k(results: Sequence[str], gold: Iterable[str], k: int) -> bool:
    """Whether any gold function appears in the top-k results."""
    gold_set = set(gold)
    return bool(gold_set & set(results[:k]))


# --- persistence -----------------------------------------------------------

def save_index(index: RetrievalIndex, path: str | Path) -> None:
    """Write header + per-entry records; vectors stored as 32-bit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "backend_name": index.backend_name,
            "dimension": index.dimension,
            "toolset_version": index.toolset_version,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for fid, vec in index.entries:
            record = {"id": fid, "vector": [float(x) for x in vec.astype(np.float32)]}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_index(path: str | Path, toolset: Toolset | None = None) -> RetrievalIndex:
    """Load a persisted index, verifying the toolset version when given."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ValueError(f"{path}: empty index file")
        header = json.loads(header_line)
        entries: list[tuple[str, np.ndarray]] = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["vector"], dtype=np.float32)
            if vec.shape != (header["dimension"],):
                raise DimensionMismatch(
                    f"{path}: entry {rec['id']} has dimension {vec.shape[0]}"
                )
            entries.append((rec["id"], vec))
    index = RetrievalIndex(
        toolset_version=header["toolset_version"],
        backend_name=header["backend_name"],
        dimension=header["dimension"],
        entries=tuple(entries),
    )
    if toolset is not None:
        check_fresh(index, toolset)
    return index

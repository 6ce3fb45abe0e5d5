"""Dense cosine-similarity document index and coarse-grained retrieval.

Search is exact flat search: scores are dot products of unit-normalized
vectors, equivalent to an exhaustive sort by (score descending, insertion
order ascending). No approximate structures; at the scales this targets,
correctness and oracle-testability win.

Index file format: a JSON manifest line ``{"mode","dim","count"}`` followed
by one ``{"doc_id"}`` line per entry; vectors live in a ``<stem>.vec``
little-endian float32 sidecar, row-major, in entry order.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._http import post_json
from .kb import KnowledgeBase, Passage, passages_of
from .util import atomic_write_bytes, json_line

logger = logging.getLogger(__name__)


class RetrievalMode(str, Enum):
    TEXTUAL_TITLE = "textual_title"
    TEXTUAL_TITLE_SUMMARY = "textual_title_summary"
    VISUAL = "visual"


class TextEmbedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class EmbedderError(Exception):
    def __init__(self, doc_id: str, cause: Exception):
        super().__init__(f"embedding failed for document {doc_id!r}: {cause}")
        self.doc_id = doc_id


class HashEmbedder:
    """Deterministic pseudo-embedder: hashes text into a seeded unit vector.

    Stands in for a frozen text encoder in tests and synthetic corpora;
    identical text always maps to the identical vector.
    """

    def __init__(self, dim: int, salt: str = ""):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.salt = salt

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256((self.salt + text).encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.PCG64(seed))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)


class RemoteTextEmbedder:
    """Client for a live embedding service (POST /v1/embed).

    Request ``{"texts": [str, ...]}``; response ``{"embeddings": [[f32...]]}``.
    Never required by tests; dataset files carry precomputed query embeddings.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, max_retries: int = 3):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries

    def embed(self, text: str) -> np.ndarray:
        body = post_json(
            f"{self.endpoint}/v1/embed",
            {"texts": [text]},
            timeout=self.timeout,
            max_retries=self.max_retries,
        )
        return np.asarray(body["embeddings"][0], dtype=np.float64)


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    score: float
    rank: int  # 1-based; scores non-increasing with rank


@dataclass(frozen=True)
class DenseIndex:
    """Immutable after build; search is pure and thread-safe."""

    mode: RetrievalMode
    dim: int
    doc_ids: tuple[str, ...]
    matrix: np.ndarray  # float64, unit rows, shape (N, dim)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __post_init__(self):
        self.matrix.setflags(write=False)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero vector cannot be normalized")
    return matrix / norms


def build_index(
    kb: KnowledgeBase,
    mode: RetrievalMode,
    text_embedder: TextEmbedder | None = None,
) -> DenseIndex:
    """One entry per eligible document; vectors are normalized on insertion.

    Visual mode uses the stored image embeddings verbatim (documents without
    one are skipped); textual modes embed the title, optionally plus summary.
    """
    mode = RetrievalMode(mode)
    doc_ids: list[str] = []
    rows: list[np.ndarray] = []
    if mode is RetrievalMode.VISUAL:
        for doc in kb.documents.values():
            if doc.image_embedding is None:
                continue
            doc_ids.append(doc.id)
            rows.append(doc.image_embedding.astype(np.float64))
        if not rows:
            raise ValueError("visual mode: no documents carry image embeddings")
    else:
        if text_embedder is None:
            raise ValueError(f"{mode.value} mode requires a text embedder")
        for doc in kb.documents.values():
            text = (
                doc.title
                if mode is RetrievalMode.TEXTUAL_TITLE
                else doc.title + "\n" + doc.summary
            )
            try:
                vec = np.asarray(text_embedder.embed(text), dtype=np.float64)
            except Exception as exc:
                raise EmbedderError(doc.id, exc) from exc
            if vec.ndim != 1:
                raise EmbedderError(doc.id, ValueError(f"bad shape {vec.shape}"))
            doc_ids.append(doc.id)
            rows.append(vec)
    matrix = _normalize_rows(np.vstack(rows))
    dim = matrix.shape[1]
    return DenseIndex(mode=mode, dim=dim, doc_ids=tuple(doc_ids), matrix=matrix)


def search(index: DenseIndex, query: Sequence[float] | np.ndarray, k: int) -> list[RetrievalHit]:
    """Top-k entries by cosine score; ties break toward earlier insertion."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    scores = index.matrix @ q
    order = np.argsort(-scores, kind="stable")[: min(k, len(index.doc_ids))]
    return [
        RetrievalHit(doc_id=index.doc_ids[i], score=float(scores[i]), rank=rank)
        for rank, i in enumerate(order, start=1)
    ]


def candidate_passages(
    kb: KnowledgeBase, hits: Sequence[RetrievalHit], k: int
) -> list[Passage]:
    """Union of passages from the first min(k, |hits|) hits.

    Order is (document rank, section order); sections are distinct so no
    deduplication is needed.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    ranks = [h.rank for h in hits]
    if ranks != sorted(ranks):
        raise ValueError("hits must be sorted by rank")
    out: list[Passage] = []
    for hit in hits[: min(k, len(hits))]:
        out.extend(passages_of(kb, hit.doc_id))
    return out


@dataclass(frozen=True)
class RecallEntry:
    k: int
    recall: float
    num_queries: int


@dataclass(frozen=True)
class RecallReport:
    entries: tuple[RecallEntry, ...]
    num_excluded: int
    excluded: tuple[str, ...]  # one message per excluded query

    def to_json_obj(self) -> list[dict]:
        return [
            {"k": e.k, "recall": e.recall, "num_queries": e.num_queries}
            for e in self.entries
        ]


def gold_rank(index: DenseIndex, query: np.ndarray, gold_doc_id: str) -> int:
    """1-based rank of the gold document under search ordering."""
    positions = [i for i, d in enumerate(index.doc_ids) if d == gold_doc_id]
    if not positions:
        raise LookupError(f"gold document {gold_doc_id!r} not in index")
    gold_pos = positions[0]
    scores = index.matrix @ np.asarray(query, dtype=np.float64)
    gold_score = scores[gold_pos]
    better = int(np.sum(scores > gold_score))
    tied_before = int(np.sum(scores[:gold_pos] == gold_score))
    return better + tied_before + 1


def recall_at_k(
    index: DenseIndex,
    queries: Sequence[tuple[Sequence[float], str]],
    ks: Sequence[int],
) -> RecallReport:
    """Fraction of queries whose gold document lands in the top-k.

    Queries with an unknown gold id are excluded (and counted), not fatal.
    """
    if not ks or any(k < 1 for k in ks):
        raise ValueError("ks must be positive integers")
    ranks: list[int] = []
    excluded: list[str] = []
    for i, (vec, gold) in enumerate(queries):
        try:
            ranks.append(gold_rank(index, np.asarray(vec, dtype=np.float64), gold))
        except LookupError as exc:
            excluded.append(f"query {i}: {exc}")
    entries = []
    n = len(ranks)
    for k in ks:
        hit = sum(1 for r in ranks if r <= k)
        entries.append(RecallEntry(k=int(k), recall=(hit / n) if n else 0.0, num_queries=n))
    if excluded:
        logger.warning("recall evaluation excluded %d queries", len(excluded))
    return RecallReport(
        entries=tuple(entries), num_excluded=len(excluded), excluded=tuple(excluded)
    )


def save_recall_report(report: RecallReport, path: str | Path) -> Path:
    atomic_write_bytes(
        path,
        (json.dumps(report.to_json_obj(), indent=2) + "\n").encode("utf-8"),
    )
    return Path(path)


def index_sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".vec")


def save_index(index: DenseIndex, path: str | Path) -> Path:
    path = Path(path)
    lines = [
        json_line({"mode": index.mode.value, "dim": index.dim, "count": len(index)})
    ]
    lines.extend(json_line({"doc_id": d}) for d in index.doc_ids)
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
    atomic_write_bytes(
        index_sidecar_path(path), index.matrix.astype("<f4").tobytes(order="C")
    )
    return path


def load_index(path: str | Path) -> DenseIndex:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty index file")
    header = json.loads(lines[0])
    mode = RetrievalMode(header["mode"])
    dim = int(header["dim"])
    count = int(header["count"])
    doc_ids = tuple(json.loads(line)["doc_id"] for line in lines[1:] if line.strip())
    if len(doc_ids) != count:
        raise ValueError(f"{path}: header count {count} != {len(doc_ids)} entries")
    raw = np.fromfile(index_sidecar_path(path), dtype="<f4")
    if raw.size != count * dim:
        raise ValueError(f"{path}: sidecar size mismatch")
    matrix = raw.reshape(count, dim).astype(np.float64)
    return DenseIndex(mode=mode, dim=dim, doc_ids=doc_ids, matrix=matrix)

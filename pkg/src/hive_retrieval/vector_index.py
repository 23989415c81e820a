"""Exact cosine-similarity retrieval over precomputed document embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from hive_retrieval.errors import DegenerateInputError, DimensionMismatchError, IngestionError

if TYPE_CHECKING:
    from hive_retrieval.ingestion import DocumentRecord, EmbeddingStore


@dataclass(frozen=True, slots=True)
class ScoredHit:
    doc_id: str
    score: float
    rank: int


def _as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-d vector, got shape {vec.shape}")
    return vec


def cosine(a, b) -> float:
    """Cosine similarity of two nonzero vectors of equal dimension."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine is undefined for a zero-magnitude vector")
    return float(np.dot(a, b)) / (na * nb)


class Index:
    """Immutable brute-force index.

    Rows are kept sorted by ascending doc_id so that a stable sort on
    descending score yields the documented tie-break for free.
    """

    def __init__(self, doc_ids: Sequence[str], vectors: np.ndarray, dim: int):
        order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
        self.doc_ids: tuple[str, ...] = tuple(doc_ids[i] for i in order)
        matrix = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64)[order]).reshape(-1, dim)
        matrix.flags.writeable = False
        self.vectors = matrix
        self.dim = dim
        norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
        norms.flags.writeable = False
        self.norms = norms
        self._position = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._position

    def vector(self, doc_id: str) -> np.ndarray:
        return self.vectors[self._position[doc_id]]

    def scores(self, query_vec) -> np.ndarray:
        """Cosine of ``query_vec`` against every row, in index order."""
        q = _as_vector(query_vec)
        if q.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"query dimension {q.shape[0]} does not match index dimension {self.dim}"
            )
        if not np.all(np.isfinite(q)):
            raise DegenerateInputError("query vector contains non-finite values")
        qn = float(np.sqrt(np.dot(q, q)))
        if qn == 0.0:
            raise DegenerateInputError("query vector has zero magnitude")
        if len(self.doc_ids) == 0:
            return np.empty(0)
        return (self.vectors @ q) / (self.norms * qn)


def build_index(docs: Sequence[DocumentRecord], store: EmbeddingStore) -> Index:
    seen: set[str] = set()
    rows = []
    for doc in docs:
        if doc.doc_id in seen:
            raise IngestionError(f"duplicate document id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        if doc.doc_id not in store:
            raise IngestionError(f"no embedding for document id {doc.doc_id!r}")
        rows.append(store.row(doc.doc_id))
    ids = [doc.doc_id for doc in docs]
    vectors = store.matrix[rows] if rows else np.empty((0, store.dim))
    if vectors.shape[0] and not np.all(np.isfinite(vectors)):
        raise DegenerateInputError("document embeddings contain non-finite values")
    index = Index(ids, vectors, store.dim)
    zero = np.flatnonzero(index.norms == 0.0)
    if zero.size:
        raise DegenerateInputError(
            f"zero-magnitude embedding for document id {index.doc_ids[zero[0]]!r}"
        )
    return index


def top_k(index: Index, query_vec, k: int) -> list[ScoredHit]:
    """Top ``k`` documents by cosine, ties broken by ascending doc_id."""
    if k < 0:
        raise ValueError("k must be non-negative")
    scores = index.scores(query_vec)
    n = scores.shape[0]
    k = min(k, n)
    if k == 0:
        return []
    if k < n:
        # Keep everything tied with the k-th best so the tie-break stays exact.
        kth = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= kth)
    else:
        candidates = np.arange(n)
    order = candidates[np.argsort(-scores[candidates], kind="stable")][:k]
    return [
        ScoredHit(index.doc_ids[i], float(scores[i]), rank)
        for rank, i in enumerate(order, start=1)
    ]

"""Loaders and writers for corpora, queries, qrels and embedding stores.

Text data is JSONL. Embeddings are JSONL (``{"id": ..., "vector": [...]}``)
or a compact little-endian binary layout::

    b"HIVEEMB1"                      magic, 8 bytes
    dim        uint32
    count      uint64
    count x {
        id_len uint32, id utf-8 bytes,
        dim x float32
    }
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from hive_retrieval.errors import DegenerateInputError, DimensionMismatchError, IngestionError

log = logging.getLogger(__name__)

EMB_MAGIC = b"HIVEEMB1"
_HEADER = struct.Struct("<8sIQ")
_U32 = struct.Struct("<I")

ORIGINAL_VARIANT = "original"
_VARIANT_SEP = "::"


@dataclass(frozen=True, slots=True)
class DocumentRecord:
    doc_id: str
    text: str


@dataclass(frozen=True, slots=True)
class QueryRecord:
    query_id: str
    text: str
    image_caption: str = ""
    image_ref: str = ""
    domain: str = "default"


class QrelsTable:
    """Graded judgments keyed by (query_id, doc_id)."""

    def __init__(self, entries: Mapping[tuple[str, str], int] | None = None):
        self._by_query: dict[str, dict[str, int]] = {}
        for (qid, did), grade in (entries or {}).items():
            self.set(qid, did, grade)

    def set(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise ValueError(f"negative relevance grade {grade} for ({query_id}, {doc_id})")
        self._by_query.setdefault(query_id, {})[doc_id] = int(grade)

    def grades(self, query_id: str) -> dict[str, int]:
        return dict(self._by_query.get(query_id, {}))

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._by_query.get(query_id, {}).get(doc_id, 0)

    def query_ids(self) -> list[str]:
        return sorted(self._by_query)

    def is_evaluable(self, query_id: str) -> bool:
        return any(g > 0 for g in self._by_query.get(query_id, {}).values())

    def items(self) -> Iterator[tuple[str, str, int]]:
        for qid in sorted(self._by_query):
            for did in sorted(self._by_query[qid]):
                yield qid, did, self._by_query[qid][did]

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_query.values())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, QrelsTable) and self._by_query == other._by_query


@dataclass(frozen=True, eq=False)
class EmbeddingStore:
    """Id-addressable, read-only matrix of vectors with one uniform dimension."""

    ids: tuple[str, ...]
    matrix: np.ndarray
    kind: str = "document"
    _rows: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("document", "query"):
            raise ValueError(f"unknown embedding store kind {self.kind!r}")
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(self.ids):
            raise ValueError("matrix must have one row per id")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        rows = {}
        for i, key in enumerate(self.ids):
            if key in rows:
                raise IngestionError(f"duplicate embedding id {key!r}")
            rows[key] = i
        object.__setattr__(self, "_rows", rows)

    @classmethod
    def from_mapping(cls, vectors: Mapping[str, Sequence[float]], kind: str = "document",
                     dim: int | None = None) -> EmbeddingStore:
        ids = tuple(vectors)
        if not ids:
            return cls((), np.empty((0, dim or 0)), kind)
        rows = [np.asarray(vectors[i], dtype=np.float64) for i in ids]
        for key, row in zip(ids, rows):
            if row.shape != rows[0].shape:
                raise DimensionMismatchError(
                    f"dimension mismatch for {key!r}: expected {rows[0].shape[0]}, got {row.shape[0]}"
                )
        return cls(ids, np.array(rows), kind)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: object) -> bool:
        return key in self._rows

    def row(self, key: str) -> int:
        return self._rows[key]

    def get(self, key: str) -> np.ndarray | None:
        i = self._rows.get(key)
        return None if i is None else self.matrix[i]


def variant_key(query_id: str, variant: str = ORIGINAL_VARIANT) -> str:
    """Store key for a query embedding variant.

    The original variant is stored under the bare query id; other variants
    (``compensatory:<hash>``) are suffixed so one file can hold both.
    """
    if variant == ORIGINAL_VARIANT:
        return query_id
    return f"{query_id}{_VARIANT_SEP}{variant}"


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"malformed JSON: {exc.msg}", str(path), lineno) from None
            if not isinstance(obj, dict):
                raise IngestionError("expected a JSON object", str(path), lineno)
            yield lineno, obj


def _required_str(obj: dict, key: str, path: Path, lineno: int, allow_empty: bool = True) -> str:
    if key not in obj:
        raise IngestionError(f"missing field {key!r}", str(path), lineno)
    value = obj[key]
    if isinstance(value, (int, float)) and not isinstance(value, bool) and key == "id":
        value = str(value)
    if not isinstance(value, str):
        raise IngestionError(f"field {key!r} must be a string", str(path), lineno)
    if not allow_empty and not value:
        raise IngestionError(f"field {key!r} must be non-empty", str(path), lineno)
    return value


def _optional_str(obj: dict, key: str, default: str, path: Path, lineno: int) -> str:
    value = obj.get(key)
    if value is None:
        return default
    if not isinstance(value, str):
        raise IngestionError(f"field {key!r} must be a string", str(path), lineno)
    return value


def load_corpus(path) -> list[DocumentRecord]:
    path = Path(path)
    docs: list[DocumentRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        doc_id = _required_str(obj, "id", path, lineno, allow_empty=False)
        text = _required_str(obj, "text", path, lineno)
        if doc_id in seen:
            raise IngestionError(f"duplicate document id {doc_id!r}", str(path), lineno)
        seen.add(doc_id)
        docs.append(DocumentRecord(doc_id, text))
    if not docs:
        log.warning("corpus %s is empty", path)
    return docs


def load_queries(path) -> list[QueryRecord]:
    path = Path(path)
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        qid = _required_str(obj, "id", path, lineno, allow_empty=False)
        text = _required_str(obj, "text", path, lineno)
        if qid in seen:
            raise IngestionError(f"duplicate query id {qid!r}", str(path), lineno)
        seen.add(qid)
        queries.append(QueryRecord(
            query_id=qid,
            text=text,
            image_caption=_optional_str(obj, "image_caption", "", path, lineno),
            image_ref=_optional_str(obj, "image", "", path, lineno),
            domain=_optional_str(obj, "domain", "default", path, lineno) or "default",
        ))
    if not queries:
        log.warning("query file %s is empty", path)
    return queries


def load_qrels(path) -> QrelsTable:
    path = Path(path)
    table = QrelsTable()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise IngestionError(
                    f"expected 3 tab-separated columns, got {len(cols)}", str(path), lineno
                )
            qid, did, raw = (c.strip() for c in cols)
            try:
                grade = int(raw)
            except ValueError:
                raise IngestionError(f"non-integer grade {raw!r}", str(path), lineno) from None
            if grade < 0:
                raise IngestionError(f"negative grade {grade} is not supported", str(path), lineno)
            if did in table.grades(qid):
                log.warning("%s:%d: duplicate judgment for (%s, %s) overwrites earlier grade",
                            path, lineno, qid, did)
            table.set(qid, did, grade)
    return table


def _check_vector(vec: list, dim: int | None, key: str, path: Path, lineno: int) -> int:
    if not isinstance(vec, list) or not vec:
        raise IngestionError(f"field 'vector' for {key!r} must be a non-empty list", str(path), lineno)
    if dim is not None and len(vec) != dim:
        raise IngestionError(
            f"dimension mismatch for {key!r}: expected {dim}, got {len(vec)}", str(path), lineno
        )
    for x in vec:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise IngestionError(f"non-finite or non-numeric component in {key!r}", str(path), lineno)
    return len(vec)


def _load_embeddings_jsonl(path: Path, kind: str) -> EmbeddingStore:
    ids: list[str] = []
    rows: list[list[float]] = []
    dim: int | None = None
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        key = _required_str(obj, "id", path, lineno, allow_empty=False)
        if "vector" not in obj:
            raise IngestionError("missing field 'vector'", str(path), lineno)
        dim = _check_vector(obj["vector"], dim, key, path, lineno)
        if key in seen:
            raise IngestionError(f"duplicate embedding id {key!r}", str(path), lineno)
        seen.add(key)
        ids.append(key)
        rows.append(obj["vector"])
    if dim is None:
        raise IngestionError("embedding file contains no vectors", str(path))
    return EmbeddingStore(tuple(ids), np.array(rows, dtype=np.float64), kind)


def _load_embeddings_binary(path: Path, kind: str) -> EmbeddingStore:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise IngestionError("truncated header", str(path))
    magic, dim, count = _HEADER.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise IngestionError(f"bad magic {magic!r}", str(path))
    if dim == 0:
        raise IngestionError("dimension must be positive", str(path))
    offset = _HEADER.size
    vec_bytes = 4 * dim
    ids: list[str] = []
    matrix = np.empty((count, dim), dtype=np.float32) if count <= len(data) else None
    if matrix is None:
        raise IngestionError(f"truncated payload: header claims {count} records", str(path))
    seen: set[str] = set()
    for i in range(count):
        if offset + 4 > len(data):
            raise IngestionError(f"truncated payload at record {i}", str(path))
        (id_len,) = _U32.unpack_from(data, offset)
        offset += 4
        if offset + id_len + vec_bytes > len(data):
            raise IngestionError(f"truncated payload at record {i}", str(path))
        try:
            key = data[offset:offset + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise IngestionError(f"record {i} id is not valid UTF-8", str(path)) from None
        offset += id_len
        if key in seen:
            raise IngestionError(f"duplicate embedding id {key!r}", str(path))
        seen.add(key)
        ids.append(key)
        matrix[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(data):
        raise IngestionError(f"{len(data) - offset} trailing bytes after last record", str(path))
    if not np.all(np.isfinite(matrix)):
        raise DegenerateInputError("non-finite component in embedding payload", str(path))
    return EmbeddingStore(tuple(ids), matrix.astype(np.float64), kind)


def load_embeddings(path, kind: str = "document") -> EmbeddingStore:
    """Load either embedding format; the binary one is recognised by its magic."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(EMB_MAGIC))
    if head == EMB_MAGIC:
        return _load_embeddings_binary(path, kind)
    if head[:1] in (b"{", b"\n", b" ", b"\r", b"\t", b""):
        return _load_embeddings_jsonl(path, kind)
    raise IngestionError(f"bad magic {head!r}: neither HIVEEMB1 binary nor JSONL", str(path))


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_embeddings_binary(path, store: EmbeddingStore) -> None:
    """Write the binary format. Components are stored as float32."""
    parts = [_HEADER.pack(EMB_MAGIC, store.dim, len(store))]
    f32 = store.matrix.astype("<f4")
    for key, row in zip(store.ids, f32):
        raw = key.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    _atomic_write_bytes(Path(path), b"".join(parts))


def write_embeddings_jsonl(path, store: EmbeddingStore) -> None:
    lines = [
        json.dumps({"id": key, "vector": [float(x) for x in row]})
        for key, row in zip(store.ids, store.matrix)
    ]
    _atomic_write_bytes(Path(path), "".join(line + "\n" for line in lines).encode("utf-8"))


def write_corpus(path, docs: Iterable[DocumentRecord]) -> None:
    body = "".join(
        json.dumps({"id": d.doc_id, "text": d.text}, ensure_ascii=False) + "\n" for d in docs
    )
    _atomic_write_bytes(Path(path), body.encode("utf-8"))


def write_queries(path, queries: Iterable[QueryRecord]) -> None:
    rows = []
    for q in queries:
        obj = {"id": q.query_id, "text": q.text, "image_caption": q.image_caption}
        if q.image_ref:
            obj["image"] = q.image_ref
        obj["domain"] = q.domain
        rows.append(json.dumps(obj, ensure_ascii=False) + "\n")
    _atomic_write_bytes(Path(path), "".join(rows).encode("utf-8"))


def write_qrels(path, qrels: QrelsTable) -> None:
    body = "".join(f"{q}\t{d}\t{g}\n" for q, d, g in qrels.items())
    _atomic_write_bytes(Path(path), body.encode("utf-8"))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(
    docs: Sequence[DocumentRecord],
    qrels: QrelsTable | None = None,
    queries: Sequence[QueryRecord] | None = None,
    doc_embeddings: EmbeddingStore | None = None,
    text_only: bool = False,
) -> ValidationReport:
    """Cross-reference checks. Every violation is reported, none are dropped."""
    report = ValidationReport()
    doc_ids = {d.doc_id for d in docs}
    if doc_embeddings is not None:
        for d in docs:
            if d.doc_id not in doc_embeddings:
                report.violations.append(f"document {d.doc_id!r} has no embedding")
        norms = np.sqrt(np.einsum("ij,ij->i", doc_embeddings.matrix, doc_embeddings.matrix))
        for key in np.asarray(doc_embeddings.ids, dtype=object)[norms == 0.0]:
            report.violations.append(f"embedding {key!r} has zero magnitude")
    query_ids = {q.query_id for q in queries} if queries is not None else None
    if queries is not None and not text_only:
        for q in queries:
            if not q.image_caption:
                report.violations.append(f"query {q.query_id!r} has no image caption")
    if qrels is not None:
        for qid, did, _ in qrels.items():
            if did not in doc_ids:
                report.violations.append(f"qrels ({qid}, {did}): unknown document {did!r}")
            if query_ids is not None and qid not in query_ids:
                report.violations.append(f"qrels ({qid}, {did}): unknown query {qid!r}")
    return report


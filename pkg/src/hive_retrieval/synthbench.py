"""Synthetic benchmarks with a planted image-only relevance signal.

Each query gets a private set of *topic* terms (its text) and *gap* terms
(its image caption). Its single relevant document carries the gap terms
and a ``1 - gap_strength`` share of the topic terms; distractor documents
carry about half the topic terms and no gap terms. Everything else is
background filler.

Query embeddings cover the query text only: the synthetic base retriever
is blind to the image, which is what makes a caption-aware second pass
worthwhile. Document and query vectors come from the same
:class:`~hive_retrieval.embedding.HashProjectionEmbedder`, rounded to
float32 so they survive the binary embedding format unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hive_retrieval import ingestion
from hive_retrieval.embedding import HashProjectionEmbedder, tokenize
from hive_retrieval.errors import ConfigError
from hive_retrieval.ingestion import DocumentRecord, EmbeddingStore, QrelsTable, QueryRecord
from hive_retrieval.llm import OracleState

DEFAULT_DOMAINS = ("chemistry", "gaming", "law", "physics", "travel")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
# Fixed English scaffolding; never used in documents, so it carries no signal.
_QUESTION_FORMS = ("why does", "how do", "what explains", "when does")
_CAPTION_FORMS = ("an image showing", "a diagram of", "a screenshot with", "a chart of")
_STOPWORDS = frozenset(tokenize(" ".join(_QUESTION_FORMS + _CAPTION_FORMS)))

FILES = {
    "corpus": "corpus.jsonl",
    "queries": "queries.jsonl",
    "qrels": "qrels.tsv",
    "doc_embeddings": "doc_embeddings.bin",
    "query_embeddings": "query_embeddings.bin",
    "oracle_state": "oracle_state.json",
}
MANIFEST = "benchmark.json"


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 7
    n_docs: int = 5000
    n_queries: int = 200
    dim: int = 128
    vocab_size: int = 4000
    gap_strength: float = 1.0
    distractors_per_query: int = 8
    domains: tuple[str, ...] = DEFAULT_DOMAINS
    topic_terms: int = 6
    gap_terms: int = 3
    filler_terms: int = 8

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if self.dim < 8:
            raise ConfigError("dim must be at least 8")
        if not 0.0 <= self.gap_strength <= 1.0:
            raise ConfigError("gap_strength must lie in [0, 1]")
        if self.n_queries < 1 or self.seed < 0:
            raise ConfigError("n_queries must be positive and seed non-negative")
        if min(self.topic_terms, self.gap_terms, self.filler_terms) < 1 or self.distractors_per_query < 0:
            raise ConfigError("term counts must be positive and distractors non-negative")
        if not self.domains:
            raise ConfigError("at least one domain label is required")
        planted = self.n_queries * (1 + self.distractors_per_query)
        if self.n_docs < planted:
            raise ConfigError(
                f"n_docs={self.n_docs} cannot hold {self.n_queries} relevant docs plus "
                f"{self.distractors_per_query} distractors each ({planted} needed)"
            )
        reserved = self.n_queries * (self.topic_terms + self.gap_terms)
        needed = self.filler_terms + self.gap_terms + self.topic_terms
        if self.vocab_size < reserved + needed:
            raise ConfigError(
                f"vocab_size={self.vocab_size} too small: {reserved} terms are reserved for disjoint "
                f"topic/gap sets and at least {needed} background terms are needed"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = list(self.domains)
        return d


@dataclass
class Benchmark:
    spec: SynthSpec
    docs: list[DocumentRecord]
    queries: list[QueryRecord]
    qrels: QrelsTable
    doc_store: EmbeddingStore
    query_store: EmbeddingStore
    oracle_state: OracleState
    relevant: dict[str, str] = field(default_factory=dict)

    @property
    def embedder(self) -> HashProjectionEmbedder:
        return HashProjectionEmbedder(self.spec.dim, self.spec.seed)


def _vocabulary(rng: np.random.Generator, size: int) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words: dict[str, None] = {}
    while len(words) < size:
        n = int(rng.integers(2, 5))
        word = "".join(syllables[i] for i in rng.integers(0, len(syllables), n))
        if word not in _STOPWORDS:
            words.setdefault(word)
    return list(words)


def _pick(rng: np.random.Generator, pool: Sequence[str], n: int) -> list[str]:
    return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]


def _f32(matrix: np.ndarray) -> np.ndarray:
    return matrix.astype(np.float32).astype(np.float64)


def generate(spec: SynthSpec) -> Benchmark:
    rng = np.random.default_rng(spec.seed)
    vocab = _vocabulary(rng, spec.vocab_size)
    reserved = spec.n_queries * (spec.topic_terms + spec.gap_terms)
    background = vocab[reserved:]
    filler_len = spec.filler_terms

    queries: list[QueryRecord] = []
    oracle_queries: dict[str, dict] = {}
    doc_texts: list[str] = []
    planted_owner: list[str | None] = []
    stride = spec.topic_terms + spec.gap_terms
    for i in range(spec.n_queries):
        qid = f"q{i:04d}"
        terms = vocab[i * stride:(i + 1) * stride]
        topic, gap = terms[: spec.topic_terms], terms[spec.topic_terms:]
        domain = spec.domains[int(rng.integers(len(spec.domains)))]
        text = f"{_QUESTION_FORMS[i % len(_QUESTION_FORMS)]} {' '.join(topic)}"
        caption = f"{_CAPTION_FORMS[i % len(_CAPTION_FORMS)]} {' '.join(gap)}"
        queries.append(QueryRecord(qid, text, caption, f"synthetic://{qid}.png", domain))
        oracle_queries[qid] = {"text": text, "caption": caption, "gap_terms": list(gap)}

        kept = round((1.0 - spec.gap_strength) * spec.topic_terms)
        tokens = list(gap) + _pick(rng, topic, kept) + _pick(rng, background, filler_len)
        doc_texts.append(" ".join(tokens[j] for j in rng.permutation(len(tokens))))
        planted_owner.append(qid)
        half = max(1, (spec.topic_terms + 1) // 2)
        for _ in range(spec.distractors_per_query):
            tokens = _pick(rng, topic, half) + _pick(rng, background, filler_len)
            doc_texts.append(" ".join(tokens[j] for j in rng.permutation(len(tokens))))
            planted_owner.append(None)

    body_len = filler_len + spec.gap_terms
    while len(doc_texts) < spec.n_docs:
        doc_texts.append(" ".join(_pick(rng, background, body_len)))
        planted_owner.append(None)

    order = rng.permutation(len(doc_texts))
    width = max(5, len(str(len(doc_texts))))
    docs: list[DocumentRecord] = []
    qrels = QrelsTable()
    relevant: dict[str, str] = {}
    for new_pos, old_pos in enumerate(order):
        doc_id = f"d{new_pos:0{width}d}"
        docs.append(DocumentRecord(doc_id, doc_texts[old_pos]))
        owner = planted_owner[old_pos]
        if owner is not None:
            qrels.set(owner, doc_id, 1)
            relevant[owner] = doc_id

    embedder = HashProjectionEmbedder(spec.dim, spec.seed)
    doc_store = EmbeddingStore(tuple(d.doc_id for d in docs), _f32(embedder.embed_many(d.text for d in docs)))
    query_store = EmbeddingStore(
        tuple(q.query_id for q in queries), _f32(embedder.embed_many(q.text for q in queries)), "query"
    )
    return Benchmark(spec, docs, queries, qrels, doc_store, query_store,
                     OracleState(oracle_queries, qrels), relevant)


def content_tokens(text: str) -> set[str]:
    return set(tokenize(text)) - _STOPWORDS


def describe(bench: Benchmark) -> dict:
    texts = {d.doc_id: d.text for d in bench.docs}
    domains: dict[str, int] = {}
    text_overlap: list[int] = []
    caption_overlap: list[int] = []
    for q in bench.queries:
        domains[q.domain] = domains.get(q.domain, 0) + 1
        rel: set[str] = set()
        for doc_id, grade in bench.qrels.grades(q.query_id).items():
            if grade > 0:
                rel |= content_tokens(texts[doc_id])
        text_overlap.append(len(content_tokens(q.text) & rel))
        caption_overlap.append(len(content_tokens(q.image_caption) & rel))
    return {
        "documents": len(bench.docs),
        "queries": len(bench.queries),
        "dim": bench.doc_store.dim,
        "vocab_size": bench.spec.vocab_size,
        "gap_strength": bench.spec.gap_strength,
        "judgments": len(bench.qrels),
        "queries_per_domain": dict(sorted(domains.items())),
        "query_text_vs_relevant_shared_tokens": {
            "mean": float(np.mean(text_overlap)), "max": int(max(text_overlap)),
        },
        "caption_vs_relevant_shared_tokens": {
            "mean": float(np.mean(caption_overlap)), "min": int(min(caption_overlap)),
        },
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_benchmark(bench: Benchmark, out_dir) -> dict:
    """Write every file plus ``benchmark.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ingestion.write_corpus(out / FILES["corpus"], bench.docs)
    ingestion.write_queries(out / FILES["queries"], bench.queries)
    ingestion.write_qrels(out / FILES["qrels"], bench.qrels)
    ingestion.write_embeddings_binary(out / FILES["doc_embeddings"], bench.doc_store)
    ingestion.write_embeddings_binary(out / FILES["query_embeddings"], bench.query_store)
    (out / FILES["oracle_state"]).write_text(
        json.dumps(bench.oracle_state.to_json(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    manifest = {
        "kind": "synthetic",
        "spec": bench.spec.to_dict(),
        "files": dict(FILES),
        "embedder": {"kind": "hash-projection", "dim": bench.spec.dim, "seed": bench.spec.seed},
        "digests": {name: _sha256(out / fname) for name, fname in FILES.items()},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest

"""Glue between data files, the engine, evaluation and report files.

The CLI is a thin layer over these functions; tests call them directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from hive_retrieval import evaluation, ingestion, plotting, prompts, synthbench
from hive_retrieval.config import RunConfig, load_synth_spec, read_document
from hive_retrieval.embedding import EmbeddingEndpoint, EmbeddingResolver, HashProjectionEmbedder
from hive_retrieval.errors import ConfigError, IngestionError
from hive_retrieval.evaluation import ConfigRow, EvalResult
from hive_retrieval.ingestion import DocumentRecord, EmbeddingStore, QrelsTable, QueryRecord
from hive_retrieval.llm import CachedProvider, LLMProvider, MockOracleProvider, OpenAICompatibleProvider, OracleState, ResponseCache
from hive_retrieval.pipeline import ABLATIONS, BatchResult, Engine, PipelineConfig, dumps_traces, run_batch
from hive_retrieval.synthbench import FILES, MANIFEST, Benchmark
from hive_retrieval.vector_index import Index, build_index

log = logging.getLogger(__name__)

ABLATION_ORDER = ("base", "s2_only", "s4_only", "s23", "full")
ABLATION_LABELS = {
    "base": "Base retriever alone",
    "s2_only": "+ compensatory query only (top-k_f, no union, no verify)",
    "s4_only": "+ verification only (rerank the probe set)",
    "s23": "+ compensatory query and secondary retrieval (no verify)",
    "full": "+ all four stages",
}
DEFAULT_SWEEP_K1 = (3, 5, 10)
DEFAULT_SWEEP_K2 = (30, 50)


@dataclass
class Dataset:
    docs: list[DocumentRecord]
    queries: list[QueryRecord]
    doc_store: EmbeddingStore
    qrels: QrelsTable | None = None
    query_store: EmbeddingStore | None = None
    oracle_state: OracleState | None = None
    hash_seed: int | None = None
    sources: dict[str, str] = field(default_factory=dict)

    @property
    def texts(self) -> dict[str, str]:
        return {d.doc_id: d.text for d in self.docs}


def dataset_from_benchmark(bench: Benchmark) -> Dataset:
    return Dataset(bench.docs, bench.queries, bench.doc_store, bench.qrels, bench.query_store,
                   bench.oracle_state, bench.spec.seed)


def load_benchmark_paths(path) -> dict[str, str | int | None]:
    """File paths named by a benchmark manifest (a ``benchmark.json`` or its directory)."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read benchmark manifest {manifest_path}: {exc}") from None
    root = manifest_path.parent
    files = {**FILES, **manifest.get("files", {})}
    out: dict[str, str | int | None] = {k: str(root / v) for k, v in files.items()}
    embedder = manifest.get("embedder") or {}
    out["hash_seed"] = embedder.get("seed") if embedder.get("kind") == "hash-projection" else None
    return out


def is_synth_spec(path) -> bool:
    """True when ``path`` is a SynthSpec file rather than a written benchmark."""
    path = Path(path)
    if path.is_dir():
        return False
    if path.suffix == ".toml":
        return True
    raw = read_document(path)
    return "files" not in raw and "kind" not in raw


def load_dataset(cfg: RunConfig, check_captions: bool = True) -> Dataset:
    """Load every configured file.

    ``data.benchmark`` may name a written benchmark (directory or
    ``benchmark.json``) or a SynthSpec file, which is generated in memory.
    Explicit per-file paths override the benchmark's files.
    """
    data = cfg.data
    paths: dict[str, str | int | None] = {}
    explicit = [k for k in ("corpus", "queries", "qrels", "doc_embeddings", "query_embeddings", "oracle_state")
                if getattr(data, k)]
    if data.benchmark and is_synth_spec(data.benchmark) and not explicit:
        bench = synthbench.generate(load_synth_spec(data.benchmark))
        dataset = dataset_from_benchmark(bench)
        dataset.sources = {"synth_spec": str(data.benchmark)}
        return dataset
    if data.benchmark:
        paths.update(load_benchmark_paths(data.benchmark))
    for key in ("corpus", "queries", "qrels", "doc_embeddings", "query_embeddings", "oracle_state"):
        if getattr(data, key):
            paths[key] = getattr(data, key)
    for key in ("corpus", "queries", "doc_embeddings"):
        if not paths.get(key):
            raise ConfigError(f"no {key} path configured (set data.{key} or data.benchmark)")
    docs = ingestion.load_corpus(paths["corpus"])
    queries = ingestion.load_queries(paths["queries"])
    doc_store = ingestion.load_embeddings(paths["doc_embeddings"], "document")
    qrels = ingestion.load_qrels(paths["qrels"]) if paths.get("qrels") else None
    query_store = ingestion.load_embeddings(paths["query_embeddings"], "query") if paths.get("query_embeddings") else None
    oracle = OracleState.load(paths["oracle_state"]) if paths.get("oracle_state") else None
    if query_store is not None and query_store.dim != doc_store.dim:
        raise ConfigError(f"query embedding dim {query_store.dim} != document embedding dim {doc_store.dim}")
    if check_captions and not data.text_only:
        blank = [q.query_id for q in queries if not q.image_caption]
        if blank:
            raise ConfigError(
                f"{len(blank)} queries have no image caption (first: {blank[0]}); set data.text_only to run anyway"
            )
    hash_seed = cfg.embedding.hash_seed if cfg.embedding.hash_seed is not None else paths.get("hash_seed")
    sources = {k: str(paths[k]) for k in FILES if paths.get(k)}
    return Dataset(docs, queries, doc_store, qrels, query_store, oracle, hash_seed, sources)


def data_digests(dataset: Dataset) -> dict[str, str]:
    """sha256 of every input file, keyed by role (paths left out so manifests are location-free)."""
    return {name: file_digest(path) for name, path in sorted(dataset.sources.items())}


INDEX_VECTORS = "index.bin"
INDEX_MANIFEST = "index.json"


def write_index_snapshot(index: Index, out_dir, sources: dict[str, str] | None = None) -> str:
    """Persist the index (rows in doc_id order, float32) and return its sha256."""
    out = Path(out_dir)
    store = EmbeddingStore(index.doc_ids, index.vectors.astype(np.float32).astype(np.float64))
    ingestion.write_embeddings_binary(out / INDEX_VECTORS, store)
    digest = file_digest(out / INDEX_VECTORS)
    manifest = {"documents": len(index), "dim": index.dim, "sha256": digest, "sources": sources or {}}
    _write(out / INDEX_MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return digest


def load_index_snapshot(path) -> Index:
    path = Path(path)
    vectors = path / INDEX_VECTORS if path.is_dir() else path
    manifest_path = vectors.with_name(INDEX_MANIFEST)
    if manifest_path.exists():
        expected = json.loads(manifest_path.read_text(encoding="utf-8")).get("sha256")
        if expected and expected != file_digest(vectors):
            raise IngestionError("index snapshot does not match its manifest digest", str(vectors))
    store = ingestion.load_embeddings(vectors, "document")
    return Index(list(store.ids), store.matrix, store.dim)


def make_provider(cfg: RunConfig, dataset: Dataset) -> LLMProvider:
    p = cfg.provider
    if p.kind == "mock":
        if dataset.oracle_state is None:
            raise ConfigError("the mock provider needs an oracle_state file (data.oracle_state)")
        provider: LLMProvider = MockOracleProvider(dataset.oracle_state, p.noise, cfg.pipeline.seed)
    else:
        provider = OpenAICompatibleProvider(
            model=p.model, base_url=p.base_url, api_key_env=p.api_key_env,
            timeout=p.timeout, max_retries=p.max_retries,
        )
    if p.cache_dir:
        provider = CachedProvider(provider, ResponseCache(p.cache_dir))
    return provider


def make_resolver(cfg: RunConfig, dataset: Dataset) -> EmbeddingResolver:
    e = cfg.embedding
    endpoint = None
    if e.endpoint:
        endpoint = EmbeddingEndpoint(e.endpoint, e.model, api_key_env=e.api_key_env)
    fallback = None
    if e.hash_fallback:
        if dataset.hash_seed is None:
            log.warning("compensatory queries without a precomputed embedding will use the hash "
                        "embedder, which does not share the documents' embedding space")
        fallback = HashProjectionEmbedder(dataset.doc_store.dim, dataset.hash_seed or 0)
    return EmbeddingResolver(dataset.query_store, endpoint, fallback)


def build_engine(cfg: RunConfig, dataset: Dataset, index: Index | None = None,
                 provider: LLMProvider | None = None) -> Engine:
    index = index or build_index(dataset.docs, dataset.doc_store)
    needs_llm = bool(cfg.pipeline.stages & {"synthesis", "verify"}) or provider is not None
    if provider is None and needs_llm:
        provider = make_provider(cfg, dataset)
    hyp = prompts.load_template("hypothesis", cfg.run.hypothesis_template) if cfg.run.hypothesis_template else None
    ver = prompts.load_template("verify", cfg.run.verify_template) if cfg.run.verify_template else None
    return Engine(index, dataset.texts, make_resolver(cfg, dataset), provider, cfg.pipeline,
                  hyp, ver, cfg.run.llm_inflight)


def engine_for(dataset: Dataset, provider: LLMProvider | None, config: PipelineConfig,
               index: Index | None = None, llm_inflight: int = 4) -> Engine:
    """Engine over an in-memory dataset with the hash embedder as compensatory fallback."""
    index = index or build_index(dataset.docs, dataset.doc_store)
    resolver = EmbeddingResolver(dataset.query_store, None,
                                 HashProjectionEmbedder(dataset.doc_store.dim, dataset.hash_seed or 0))
    return Engine(index, dataset.texts, resolver, provider, config, llm_inflight=llm_inflight)


def evaluate_batch(batch: BatchResult, qrels: QrelsTable, k: int = 10, gain: str = "exponential"):
    results, skipped = evaluation.evaluate_traces(batch.traces, qrels, k, gain)
    domains, overall = evaluation.aggregate(results)
    return results, domains, overall


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def write_run(out_dir, batch: BatchResult, resolved: dict | None = None) -> Path:
    """traces.jsonl + manifest.json (byte-reproducible) and timings.json (wall clock)."""
    out = Path(out_dir)
    _write(out / "traces.jsonl", dumps_traces(batch.traces))
    _write(out / "manifest.json", json.dumps(batch.manifest, indent=1, sort_keys=True) + "\n")
    _write(out / "timings.json", json.dumps(batch.timings, indent=1, sort_keys=True) + "\n")
    if resolved is not None:
        _write(out / "config.json", json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    return out


def write_eval(out_dir, results: Sequence[EvalResult], domains, overall, k: int,
               title: str = "", figure: bool = True) -> Path:
    out = Path(out_dir)
    _write(out / "per_query.csv", evaluation.per_query_csv(results))
    _write(out / "per_domain.csv", evaluation.per_domain_csv(domains, overall, k))
    _write(out / "report.md", evaluation.per_domain_markdown(domains, overall, k, title))
    if figure and domains:
        plotting.domain_bars(domains, overall, k, out / "per_domain.png", title)
    return out


def _row(label: str, config: PipelineConfig, overall) -> ConfigRow:
    if overall is None:
        return ConfigRow(label, config.name, config.k1, config.k2, 0, 0.0, 0.0)
    return ConfigRow(label, config.name, config.k1, config.k2, overall.query_count,
                     overall.mean_ndcg, overall.mean_recall)


def ablate(engine: Engine, queries: Sequence[QueryRecord], qrels: QrelsTable,
           configs: Sequence[str] = ABLATION_ORDER, jobs: int = 1, k: int = 10,
           gain: str = "exponential") -> tuple[list[ConfigRow], dict[str, BatchResult]]:
    unknown = [c for c in configs if c not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation configs {unknown}; choose from {list(ABLATION_ORDER)}")
    rows: list[ConfigRow] = []
    batches: dict[str, BatchResult] = {}
    for name in configs:
        config = replace(engine.config, stages=ABLATIONS[name])
        batch = run_batch(engine.with_config(config), queries, config, jobs)
        _, _, overall = evaluate_batch(batch, qrels, k, gain)
        rows.append(_row(ABLATION_LABELS[name], config, overall))
        batches[name] = batch
    return rows, batches


def sweep(engine: Engine, queries: Sequence[QueryRecord], qrels: QrelsTable,
          k1_values: Sequence[int] = DEFAULT_SWEEP_K1, k2_values: Sequence[int] = DEFAULT_SWEEP_K2,
          jobs: int = 1, k: int = 10, gain: str = "exponential",
          include_base: bool = True) -> tuple[list[ConfigRow], ConfigRow | None]:
    """Full pipeline over the (k1, k2) grid; returns grid rows and the base row."""
    grid = []
    for k1 in k1_values:
        for k2 in k2_values:
            grid.append(replace(engine.config, k1=k1, k2=k2, stages=ABLATIONS["full"]))  # validates each pair up front
    base_row = None
    if include_base:
        base_cfg = replace(engine.config, stages=ABLATIONS["base"])
        batch = run_batch(engine.with_config(base_cfg), queries, base_cfg, jobs)
        base_row = _row("base", base_cfg, evaluate_batch(batch, qrels, k, gain)[2])
    rows = []
    for config in grid:
        batch = run_batch(engine.with_config(config), queries, config, jobs)
        rows.append(_row(f"k1={config.k1}, k2={config.k2}", config, evaluate_batch(batch, qrels, k, gain)[2]))
    return rows, base_row


def write_ablation(out_dir, rows: Sequence[ConfigRow], k: int) -> Path:
    out = Path(out_dir)
    base = next((r.ndcg for r in rows if r.config_name == "base"), None)
    _write(out / "ablation.csv", evaluation.config_table_csv(rows, k, base))
    _write(out / "ablation.md", "## Component ablation\n\n"
           + evaluation.config_table_markdown(rows, k, base, bold="full"))
    plotting.config_bars(rows, k, out / "ablation.png", "Component ablation", base, highlight="full")
    return out


def write_sweep(out_dir, rows: Sequence[ConfigRow], base_row: ConfigRow | None, k: int) -> Path:
    out = Path(out_dir)
    base = base_row.ndcg if base_row is not None else None
    table = ([base_row] if base_row is not None else []) + list(rows)
    best = max(rows, key=lambda r: r.ndcg).label if rows else None
    _write(out / "sweep.csv", evaluation.config_table_csv(table, k, base))
    _write(out / "sweep.md", "## k1 / k2 sensitivity\n\n" + evaluation.config_table_markdown(table, k, base, bold=best))
    labels = [f"{r.k1}/{r.k2}" for r in rows]
    best_label = labels[[r.label for r in rows].index(best)] if best else None
    plotting.config_bars(list(rows), k, out / "sweep.png", "k1 / k2 sensitivity", base,
                         labels, best_label, "k1 / k2")
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Four-stage retrieval: probe, compensatory query, secondary retrieval, verification.

Stage toggles reproduce the component ablations::

    base      {}                                  stage 1 only
    s2_only   {synthesis}                         q-hat retrieves top-k_f, no union, no verify
    s4_only   {verify}                            verify/rerank the probe set
    s23       {synthesis, secondary}              union of both passes, no verify
    full      {synthesis, secondary, verify}

Final scores follow the fixed integer scheme: the i-th id in the verified
list scores ``s_max - i``; the j-th remaining pool member (in union order)
scores ``s_base - j``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from hive_retrieval import prompts
from hive_retrieval.embedding import EmbeddingResolver
from hive_retrieval.errors import AuthenticationError, ConfigError, DegenerateInputError, HiveError, InvariantError
from hive_retrieval.ingestion import QueryRecord
from hive_retrieval.llm import DEFAULT_MAX_OUTPUT_TOKENS, BoundedProvider, ChatRequest, LLMProvider
from hive_retrieval.vector_index import Index, ScoredHit, top_k

log = logging.getLogger(__name__)

SYNTHESIS = "synthesis"
SECONDARY = "secondary"
VERIFY = "verify"
ALL_STAGES = frozenset({SYNTHESIS, SECONDARY, VERIFY})

ABLATIONS: dict[str, frozenset[str]] = {
    "base": frozenset(),
    "s2_only": frozenset({SYNTHESIS}),
    "s4_only": frozenset({VERIFY}),
    "s23": frozenset({SYNTHESIS, SECONDARY}),
    "full": ALL_STAGES,
}

IMAGE_SEPARATOR = "\n[IMAGE] "


def parse_stages(spec: str | Sequence[str]) -> frozenset[str]:
    """Accept an ablation name (``full``, ``s23``...) or a comma list of stage names."""
    if isinstance(spec, str):
        if spec in ABLATIONS:
            return ABLATIONS[spec]
        parts = [p.strip() for p in spec.split(",") if p.strip()]
    else:
        parts = list(spec)
    if len(parts) == 1 and parts[0] in ABLATIONS:
        return ABLATIONS[parts[0]]
    unknown = set(parts) - ALL_STAGES
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}; expected {sorted(ALL_STAGES)} or {list(ABLATIONS)}")
    return frozenset(parts)


@dataclass(frozen=True)
class PipelineConfig:
    k1: int = 5
    k2: int = 50
    k_f: int = 10
    s_max: int = 1000
    s_base: int = 500
    stages: frozenset[str] = ALL_STAGES
    temperature: float = 0.0
    seed: int = 0
    model: str = "gpt-4o"
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    caption_in_secondary: bool = True
    doc_char_cap: int = prompts.DOC_CHAR_CAP
    prompt_char_budget: int = prompts.PROMPT_CHAR_BUDGET

    def __post_init__(self):
        stages = self.stages if isinstance(self.stages, str) else sorted(self.stages)
        object.__setattr__(self, "stages", parse_stages(stages) if stages else frozenset())
        for name in ("k1", "k2", "k_f", "max_output_tokens", "doc_char_cap", "prompt_char_budget"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.k2 < self.k_f:
            raise ConfigError(f"k2 ({self.k2}) must be at least k_f ({self.k_f})")
        if self.s_base + self.k1 + self.k2 > self.s_max - self.k_f:
            raise ConfigError(
                "scores would overlap: need s_base + k1 + k2 <= s_max - k_f "
                f"({self.s_base} + {self.k1 + self.k2} > {self.s_max} - {self.k_f})"
            )

    @property
    def name(self) -> str:
        for name, stages in ABLATIONS.items():
            if stages == self.stages:
                return name
        return "custom:" + "+".join(sorted(self.stages))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = sorted(self.stages)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class CandidatePool:
    d1: list[ScoredHit] = field(default_factory=list)
    compensatory_query: str | None = None
    d2: list[ScoredHit] = field(default_factory=list)
    union_ids: list[str] = field(default_factory=list)


@dataclass
class StageTrace:
    query_id: str
    domain: str
    config_name: str
    pool: CandidatePool = field(default_factory=CandidatePool)
    hypothesis_prompt_digest: str | None = None
    verify_prompt_digest: str | None = None
    verified_ids: list[str] | None = None
    llm_failures: list[dict] = field(default_factory=list)
    final: list[tuple[str, int]] = field(default_factory=list)
    degenerate: bool = False
    templates: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self, include_timings: bool = False) -> dict:
        obj = {
            "query_id": self.query_id,
            "domain": self.domain,
            "config": self.config_name,
            "degenerate": self.degenerate,
            "d1": [[h.doc_id, h.score] for h in self.pool.d1],
            "compensatory_query": self.pool.compensatory_query,
            "d2": [[h.doc_id, h.score] for h in self.pool.d2],
            "union": self.pool.union_ids,
            "hypothesis_prompt_digest": self.hypothesis_prompt_digest,
            "verify_prompt_digest": self.verify_prompt_digest,
            "verified": self.verified_ids,
            "templates": self.templates,
            "llm_failures": self.llm_failures,
            "final": [[d, s] for d, s in self.final],
        }
        if include_timings:
            obj["timings"] = self.timings
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> StageTrace:
        pool = CandidatePool(
            d1=[ScoredHit(d, s, r) for r, (d, s) in enumerate(obj.get("d1", []), start=1)],
            compensatory_query=obj.get("compensatory_query"),
            d2=[ScoredHit(d, s, r) for r, (d, s) in enumerate(obj.get("d2", []), start=1)],
            union_ids=list(obj.get("union", [])),
        )
        return cls(
            query_id=obj["query_id"],
            domain=obj.get("domain", "default"),
            config_name=obj.get("config", ""),
            pool=pool,
            hypothesis_prompt_digest=obj.get("hypothesis_prompt_digest"),
            verify_prompt_digest=obj.get("verify_prompt_digest"),
            verified_ids=obj.get("verified"),
            llm_failures=list(obj.get("llm_failures", [])),
            final=[(d, int(s)) for d, s in obj.get("final", [])],
            degenerate=bool(obj.get("degenerate", False)),
            templates=dict(obj.get("templates", {})),
            timings=dict(obj.get("timings", {})),
        )


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def form_query_text(q: QueryRecord) -> str:
    if not q.image_caption:
        return q.text
    if not q.text:
        return IMAGE_SEPARATOR.lstrip("\n") + q.image_caption
    return q.text + IMAGE_SEPARATOR + q.image_caption


def stage1_retrieve(index: Index, resolver: EmbeddingResolver, q: QueryRecord, k1: int) -> list[ScoredHit]:
    return top_k(index, resolver.original(q, form_query_text(q)), k1)


def _documents(ids: Sequence[str], texts: Mapping[str, str]) -> list[prompts.Document]:
    return [prompts.Document(d, texts.get(d, "")) for d in ids]


def stage2_synthesize(
    provider: LLMProvider,
    q: QueryRecord,
    d1: Sequence[ScoredHit],
    texts: Mapping[str, str],
    config: PipelineConfig,
    template: prompts.PromptTemplate | None = None,
) -> tuple[str | None, str]:
    """Ask the model for a compensatory query.

    Returns ``(query or None on parse failure, prompt digest)``.
    """
    prompt = prompts.build_hypothesis_prompt(
        q.text, q.image_caption, _documents([h.doc_id for h in d1], texts),
        template=template, doc_cap=config.doc_char_cap, budget=config.prompt_char_budget,
    )
    request = ChatRequest(
        config.model, prompts.system_text(prompts.HYPOTHESIS, template), prompt,
        config.temperature, config.max_output_tokens,
    )
    reply = provider.complete(request)
    return prompts.parse_compensatory_query(reply.text), _digest(prompt)


def stage3_retrieve(
    index: Index,
    resolver: EmbeddingResolver,
    q_hat: str,
    q: QueryRecord,
    k2: int,
    caption_in_secondary: bool = True,
) -> tuple[list[ScoredHit], str]:
    text = q_hat + IMAGE_SEPARATOR + q.image_caption if caption_in_secondary and q.image_caption else q_hat
    vec, variant = resolver.compensatory(q, text)
    return top_k(index, vec, k2), variant


def union_dedup(d1: Sequence[str], d2: Sequence[str]) -> list[str]:
    return list(dict.fromkeys([*d1, *d2]))


def stage4_verify(
    provider: LLMProvider,
    q: QueryRecord,
    union: Sequence[str],
    k_f: int,
    texts: Mapping[str, str],
    config: PipelineConfig,
    template: prompts.PromptTemplate | None = None,
) -> tuple[list[str], str, list[dict]]:
    """Verified top list, digest of the first prompt, and any fallback events.

    An unparseable reply gets one re-ask; a second failure falls back to
    the first ``k_f`` ids of the pool.
    """
    docs = _documents(union, texts)
    failures: list[dict] = []
    first_digest = ""
    for attempt, reask in enumerate((False, True)):
        prompt = prompts.build_verify_prompt(
            q.text, q.image_caption, docs, k_f, template=template,
            doc_cap=config.doc_char_cap, budget=config.prompt_char_budget, reask=reask,
        )
        if attempt == 0:
            first_digest = _digest(prompt)
        request = ChatRequest(
            config.model, prompts.system_text(prompts.VERIFY, template), prompt,
            config.temperature, config.max_output_tokens,
        )
        ranked = prompts.parse_ranked_list(provider.complete(request).text, union, k_f)
        if ranked is not None:
            return ranked, first_digest, failures
        failures.append({"stage": "verify", "event": "unparseable_ranking", "attempt": attempt + 1})
    failures.append({"stage": "verify", "event": "fallback_union_order"})
    return list(union[:k_f]), first_digest, failures


def assign_scores(ranked: Sequence[str], union: Sequence[str], config: PipelineConfig) -> list[tuple[str, int]]:
    pool = set(union)
    if len(pool) != len(union):
        raise InvariantError("candidate pool contains duplicate ids")
    placed: set[str] = set()
    out: list[tuple[str, int]] = []
    for position, doc_id in enumerate(ranked, start=1):
        if doc_id not in pool:
            raise InvariantError(f"ranked id {doc_id!r} is not in the candidate pool")
        if doc_id in placed:
            raise InvariantError(f"ranked id {doc_id!r} appears twice")
        placed.add(doc_id)
        out.append((doc_id, config.s_max - position))
    residual = [d for d in union if d not in placed]
    out.extend((doc_id, config.s_base - offset) for offset, doc_id in enumerate(residual, start=1))
    out.sort(key=lambda pair: -pair[1])
    return out


class Engine:
    """Shared, read-only state for running queries: index, texts, embeddings, provider."""

    def __init__(
        self,
        index: Index,
        texts: Mapping[str, str],
        resolver: EmbeddingResolver,
        provider: LLMProvider | None,
        config: PipelineConfig,
        hypothesis_template: prompts.PromptTemplate | None = None,
        verify_template: prompts.PromptTemplate | None = None,
        llm_inflight: int = 4,
    ):
        if provider is None and config.stages & {SYNTHESIS, VERIFY}:
            raise ConfigError(f"configuration {config.name!r} needs an LLM provider")
        self.index = index
        self.texts = texts
        self.resolver = resolver
        self.provider = BoundedProvider(provider, llm_inflight) if provider is not None else None
        self.config = config
        self.hypothesis_template = hypothesis_template or prompts.default_template(prompts.HYPOTHESIS)
        self.verify_template = verify_template or prompts.default_template(prompts.VERIFY)

    def with_config(self, config: PipelineConfig) -> Engine:
        clone = object.__new__(Engine)
        clone.__dict__.update(self.__dict__)
        if clone.provider is None and config.stages & {SYNTHESIS, VERIFY}:
            raise ConfigError(f"configuration {config.name!r} needs an LLM provider")
        clone.config = config
        return clone

    def template_versions(self) -> dict[str, str]:
        out = {}
        if SYNTHESIS in self.config.stages:
            out["hypothesis"] = self.hypothesis_template.version
        if VERIFY in self.config.stages:
            out["verify"] = self.verify_template.version
        return out

    @property
    def provider_id(self) -> str | None:
        return None if self.provider is None else self.provider.provider_id


def run_query(engine: Engine, q: QueryRecord, config: PipelineConfig | None = None) -> StageTrace:
    config = config or engine.config
    stages = config.stages
    trace = StageTrace(q.query_id, q.domain, config.name)
    trace.templates = {
        k: v for k, v in (
            ("hypothesis", engine.hypothesis_template.version if SYNTHESIS in stages else None),
            ("verify", engine.verify_template.version if VERIFY in stages else None),
        ) if v
    }
    pool = trace.pool
    text = form_query_text(q)
    if not text.strip():
        trace.degenerate = True
        return trace

    tick = time.perf_counter()
    # Without any LLM stage the probe list is the run's ranking, so retrieve at least k_f.
    depth1 = config.k1 if stages else max(config.k1, config.k_f)
    qvec = engine.resolver.original(q, text)
    pool.d1 = top_k(engine.index, qvec, depth1)
    trace.timings["retrieve_1"] = time.perf_counter() - tick

    q_hat: str | None = None
    if SYNTHESIS in stages:
        tick = time.perf_counter()
        if pool.d1:
            q_hat, trace.hypothesis_prompt_digest = stage2_synthesize(
                engine.provider, q, pool.d1, engine.texts, config, engine.hypothesis_template
            )
            if q_hat is None:
                trace.llm_failures.append({"stage": "synthesis", "event": "empty_or_unparseable"})
        else:
            trace.llm_failures.append({"stage": "synthesis", "event": "skipped_empty_probe"})
        pool.compensatory_query = q_hat if q_hat is not None else text
        trace.timings["synthesis"] = time.perf_counter() - tick

    if stages & {SYNTHESIS, SECONDARY}:
        tick = time.perf_counter()
        depth2 = config.k2 if SECONDARY in stages else config.k_f
        if q_hat is not None:
            try:
                pool.d2, _ = stage3_retrieve(
                    engine.index, engine.resolver, q_hat, q, depth2, config.caption_in_secondary
                )
            except DegenerateInputError:
                # e.g. a q-hat with no embeddable tokens; retrieve with the original vector instead
                trace.llm_failures.append({"stage": "secondary", "event": "degenerate_compensatory_embedding"})
                q_hat = None
        if q_hat is None:
            # Fallback q-hat is the original query, so reuse its embedding.
            pool.d2 = top_k(engine.index, qvec, depth2)
        trace.timings["retrieve_2"] = time.perf_counter() - tick

    d1_ids = [h.doc_id for h in pool.d1]
    d2_ids = [h.doc_id for h in pool.d2]
    if SECONDARY in stages:
        pool.union_ids = union_dedup(d1_ids, d2_ids)
    elif SYNTHESIS in stages:
        pool.union_ids = d2_ids
    else:
        pool.union_ids = d1_ids

    ranked: list[str] = []
    if VERIFY in stages and pool.union_ids:
        tick = time.perf_counter()
        ranked, trace.verify_prompt_digest, failures = stage4_verify(
            engine.provider, q, pool.union_ids, config.k_f, engine.texts, config, engine.verify_template
        )
        trace.llm_failures.extend(failures)
        trace.verified_ids = ranked
        trace.timings["verify"] = time.perf_counter() - tick

    trace.final = assign_scores(ranked, pool.union_ids, config)
    return trace


@dataclass
class BatchResult:
    traces: list[StageTrace]
    failures: list[dict]
    manifest: dict
    timings: dict


def run_batch(
    engine: Engine,
    queries: Sequence[QueryRecord],
    config: PipelineConfig | None = None,
    jobs: int = 1,
) -> BatchResult:
    """Run every query; per-query errors are collected rather than raised.

    Output order follows ``queries`` regardless of ``jobs``. Wall-clock
    timings are returned separately so traces and manifest stay
    byte-reproducible.
    """
    config = config or engine.config
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")

    def one(q: QueryRecord):
        try:
            return run_query(engine, q, config), None
        except AuthenticationError:
            raise
        except HiveError as exc:
            log.warning("query %s failed: %s", q.query_id, exc)
            return None, {"query_id": q.query_id, "error": type(exc).__name__, "message": str(exc)}

    started = time.perf_counter()
    if jobs == 1:
        outcomes = [one(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, queries))
    wall = time.perf_counter() - started

    traces = [t for t, _ in outcomes if t is not None]
    failures = [f for _, f in outcomes if f is not None]
    stage_totals: dict[str, float] = {}
    for t in traces:
        for stage, secs in t.timings.items():
            stage_totals[stage] = stage_totals.get(stage, 0.0) + secs
    manifest = {
        "config_name": config.name,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "seed": config.seed,
        "templates": {
            "hypothesis": engine.hypothesis_template.version if SYNTHESIS in config.stages else None,
            "verify": engine.verify_template.version if VERIFY in config.stages else None,
        },
        "provider": engine.provider_id if config.stages & {SYNTHESIS, VERIFY} else None,
        "embedding": engine.resolver.describe(),
        "index": {"documents": len(engine.index), "dim": engine.index.dim},
        "queries": len(queries),
        "completed": len(traces),
        "degenerate": sum(t.degenerate for t in traces),
        "llm_fallbacks": sum(len(t.llm_failures) for t in traces),
        "failures": failures,
    }
    timings = {
        "wall_seconds": wall,
        "jobs": jobs,
        "stage_seconds": stage_totals,
    }
    return BatchResult(traces, failures, manifest, timings)


def dumps_traces(traces: Sequence[StageTrace], include_timings: bool = False) -> str:
    return "".join(
        json.dumps(t.to_json(include_timings), ensure_ascii=False) + "\n" for t in traces
    )


def loads_traces(text: str) -> list[StageTrace]:
    return [StageTrace.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


def score_separation_ok(trace: StageTrace, config: PipelineConfig) -> bool:
    """Every verified score exceeds every residual score for this trace."""
    verified = set(trace.verified_ids or [])
    top = [s for d, s in trace.final if d in verified]
    rest = [s for d, s in trace.final if d not in verified]
    return not top or not rest or min(top) > max(rest)


def as_ranking(trace: StageTrace) -> list[tuple[str, float]]:
    return [(d, float(s)) for d, s in trace.final]


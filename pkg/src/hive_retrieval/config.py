"""Declarative run configuration (TOML or JSON) with strict key checking.

Example::

    [data]
    benchmark = "bench/benchmark.json"   # or corpus/queries/qrels/... paths

    [provider]
    kind = "mock"                        # mock | openai
    cache_dir = "cache"

    [pipeline]
    k1 = 5
    k2 = 50
    stages = "full"

    [run]
    output_dir = "runs"
    jobs = 4

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from hive_retrieval.errors import ConfigError
from hive_retrieval.pipeline import PipelineConfig, parse_stages
from hive_retrieval.synthbench import SynthSpec

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class DataSettings:
    benchmark: str | None = None
    corpus: str | None = None
    queries: str | None = None
    qrels: str | None = None
    doc_embeddings: str | None = None
    query_embeddings: str | None = None
    oracle_state: str | None = None
    text_only: bool = False


@dataclass
class ProviderSettings:
    kind: str = "mock"
    model: str = "gpt-4o"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 5
    noise: float = 0.0
    cache_dir: str | None = None


@dataclass
class EmbeddingSettings:
    endpoint: str | None = None
    model: str = "text-embedding-3-small"
    api_key_env: str = "OPENAI_API_KEY"
    hash_seed: int | None = None
    hash_fallback: bool = True


@dataclass
class RunSettings:
    output_dir: str = "runs"
    jobs: int = 1
    llm_inflight: int = 4
    hypothesis_template: str | None = None
    verify_template: str | None = None
    eval_k: int = 10
    gain: str = "exponential"


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    provider: ProviderSettings = field(default_factory=ProviderSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "provider": dataclasses.asdict(self.provider),
            "embedding": dataclasses.asdict(self.embedding),
            "pipeline": self.pipeline.to_dict(),
            "run": dataclasses.asdict(self.run),
        }

    def validate(self) -> None:
        if self.provider.kind not in ("mock", "openai"):
            raise ConfigError(f"provider.kind must be 'mock' or 'openai', not {self.provider.kind!r}")
        if not 0.0 <= self.provider.noise <= 1.0:
            raise ConfigError("provider.noise must lie in [0, 1]")
        if self.run.jobs < 1 or self.run.llm_inflight < 1:
            raise ConfigError("run.jobs and run.llm_inflight must be >= 1")
        if self.run.eval_k < 1:
            raise ConfigError("run.eval_k must be >= 1")
        if self.run.gain not in ("exponential", "linear"):
            raise ConfigError("run.gain must be 'exponential' or 'linear'")


_SECTIONS = {
    "data": DataSettings,
    "provider": ProviderSettings,
    "embedding": EmbeddingSettings,
    "run": RunSettings,
}
_PATH_KEYS = {
    "data": ("benchmark", "corpus", "queries", "qrels", "doc_embeddings", "query_embeddings", "oracle_state"),
    "provider": ("cache_dir",),
    "run": ("output_dir", "hypothesis_template", "verify_template"),
}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, values: dict, section: str):
    unknown = set(values) - _field_names(cls)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from None


def from_mapping(raw: dict, base_dir: Path | None = None) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS) - {"pipeline"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name) or {})
        if base_dir is not None:
            for key in _PATH_KEYS.get(name, ()):
                if values.get(key):
                    values[key] = str((base_dir / values[key]).resolve())
        sections[name] = _build(cls, values, name)
    pipe = dict(raw.get("pipeline") or {})
    unknown = set(pipe) - _field_names(PipelineConfig)
    if unknown:
        raise ConfigError(f"unknown keys in [pipeline]: {sorted(unknown)}")
    if "stages" in pipe:
        pipe["stages"] = parse_stages(pipe["stages"])
    try:
        pipeline = PipelineConfig(**pipe)
    except TypeError as exc:
        raise ConfigError(f"bad [pipeline] section: {exc}") from None
    cfg = RunConfig(pipeline=pipeline, **sections)
    cfg.validate()
    return cfg


def read_document(path) -> dict:
    """Parse a TOML (by suffix) or JSON file into a dict, as a ConfigError on failure."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        else:
            raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a table/object")
    return raw


def load(path) -> RunConfig:
    path = Path(path)
    return from_mapping(read_document(path), path.parent.resolve())


def synth_spec_from_mapping(raw: dict) -> SynthSpec:
    """SynthSpec from a flat mapping, or from its ``[synth]`` table if present."""
    values = dict(raw.get("synth", raw))
    unknown = set(values) - _field_names(SynthSpec)
    if unknown:
        raise ConfigError(f"unknown synthetic benchmark keys: {sorted(unknown)}")
    if "domains" in values:
        values["domains"] = tuple(values["domains"])
    try:
        return SynthSpec(**values)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic benchmark spec: {exc}") from None


def load_synth_spec(path) -> SynthSpec:
    return synth_spec_from_mapping(read_document(path))


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Return a copy with non-``None`` values replaced (flags win over the file)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "pipeline":
        current = cfg.pipeline.to_dict()
        current.update(values)
        if "stages" in values:
            current["stages"] = parse_stages(values["stages"])
        new = dataclasses.replace(cfg, pipeline=PipelineConfig(**current))
    else:
        new = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    new.validate()
    return new

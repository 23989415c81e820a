"""Text-generation providers: OpenAI-compatible HTTP, a mock oracle, and a response cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from hive_retrieval import prompts
from hive_retrieval.errors import (
    AuthenticationError,
    MalformedResponseError,
    MissingCredentialError,
    OracleError,
    ProviderError,
    RateLimitError,
    TransportError,
)
from hive_retrieval.ingestion import QrelsTable

log = logging.getLogger(__name__)

DEFAULT_MAX_OUTPUT_TOKENS = 1024
RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    provider: str
    cached: bool = False
    latency_ms: int = 0
    retries: int = 0


class LLMProvider(Protocol):
    provider_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def complete(provider: LLMProvider, request: ChatRequest) -> ChatResponse:
    return provider.complete(request)


def post_json_with_retries(
    client: httpx.Client,
    url: str,
    payload: dict,
    headers: dict[str, str],
    max_retries: int,
    backoff: float,
    max_backoff: float,
    sleep: Callable[[float], None],
) -> tuple[dict, int]:
    """POST ``payload`` and return (decoded body, retries used).

    Retries transport errors, 429 and 5xx with exponential backoff.
    401/403 raise immediately.
    """
    attempt = 0
    while True:
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            if attempt >= max_retries:
                raise TransportError(f"request to {url} failed after {attempt} retries: {exc}") from exc
            err_status = None
        else:
            err_status = resp.status_code
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"{url} rejected the credential (HTTP {resp.status_code})")
            if resp.status_code == 200:
                try:
                    return resp.json(), attempt
                except ValueError as exc:
                    raise MalformedResponseError(f"{url} returned non-JSON body") from exc
            if resp.status_code not in RETRYABLE_STATUS:
                raise ProviderError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
            if attempt >= max_retries:
                if resp.status_code == 429:
                    raise RateLimitError(f"{url} still rate limited after {attempt} retries")
                raise TransportError(f"{url} returned HTTP {resp.status_code} after {attempt} retries")
        delay = min(max_backoff, backoff * (2 ** attempt))
        log.debug("retrying %s (status=%s) in %.2fs", url, err_status, delay)
        sleep(delay)
        attempt += 1


class OpenAICompatibleProvider:
    """Chat-completions client for any OpenAI-compatible endpoint."""

    def __init__(
        self,
        model: str = "gpt-4o",
        base_url: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 5,
        backoff: float = 1.0,
        max_backoff: float = 30.0,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        if not self.api_key:
            raise MissingCredentialError(
                f"no API credential: set the {api_key_env} environment variable"
            )
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self.provider_id = f"openai-compatible:{self.base_url}"

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": request.model or self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        started = time.perf_counter()
        body, retries = post_json_with_retries(
            self._client,
            f"{self.base_url}/chat/completions",
            payload,
            {"Authorization": f"Bearer {self.api_key}"},
            self.max_retries,
            self.backoff,
            self.max_backoff,
            self._sleep,
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected chat-completions payload: {str(body)[:200]}") from exc
        if content is None:
            content = ""
        if not isinstance(content, str):
            raise MalformedResponseError("message content is not a string")
        return ChatResponse(
            text=content,
            provider=self.provider_id,
            latency_ms=int((time.perf_counter() - started) * 1000),
            retries=retries,
        )

    def close(self) -> None:
        self._client.close()


@dataclass
class OracleState:
    """Ground truth the mock oracle consults.

    ``queries`` maps query_id to ``{"text", "caption", "gap_terms"}``.
    """

    queries: dict[str, dict]
    qrels: QrelsTable
    _by_fingerprint: dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_fingerprint = {
            prompts.query_fingerprint(q["text"], q.get("caption", "")): qid
            for qid, q in self.queries.items()
        }

    def lookup(self, fingerprint: str) -> str | None:
        return self._by_fingerprint.get(fingerprint)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "queries": {qid: self.queries[qid] for qid in sorted(self.queries)},
            "qrels": {qid: self.qrels.grades(qid) for qid in self.qrels.query_ids()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> OracleState:
        qrels = QrelsTable()
        for qid, grades in obj.get("qrels", {}).items():
            for did, g in grades.items():
                qrels.set(qid, did, int(g))
        return cls(dict(obj["queries"]), qrels)

    @classmethod
    def load(cls, path) -> OracleState:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _stable_seed(*parts: str | int) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def mock_oracle(request: ChatRequest, state: OracleState, noise: float = 0.0, seed: int = 0) -> str:
    """Answer a hypothesis or verify prompt from ground truth.

    With ``noise > 0`` each adjacent pair of the true ranking is swapped
    with that probability, using a generator seeded from ``seed`` and the
    request text so results stay reproducible.
    """
    marker = prompts.parse_sentinel(request.user_text)
    if marker is None:
        raise OracleError("request carries no recognised sentinel marker")
    qid = state.lookup(marker.fingerprint)
    if marker.kind == prompts.HYPOTHESIS:
        if qid is None:
            raise OracleError(f"unknown query fingerprint {marker.fingerprint}")
        terms = state.queries[qid].get("gap_terms", [])
        return (
            "The image description carries cues the probe documents do not cover.\n"
            f"COMPENSATORY QUERY: {' '.join(terms)}"
        )
    if marker.kind == prompts.VERIFY:
        ids = prompts.parse_document_ids(request.user_text)
        grades = state.qrels.grades(qid) if qid is not None else {}
        ranking = sorted(dict.fromkeys(ids), key=lambda d: (-grades.get(d, 0), d))
        if noise > 0:
            rng = random.Random(_stable_seed(seed, request.user_text))
            for i in range(len(ranking) - 1):
                if rng.random() < noise:
                    ranking[i], ranking[i + 1] = ranking[i + 1], ranking[i]
        ranking = ranking[: marker.k]
        return "Ranked by how well each document resolves the query.\n```json\n" + json.dumps(ranking) + "\n```"
    raise OracleError(f"unknown sentinel kind {marker.kind!r}")


class MockOracleProvider:
    def __init__(self, state: OracleState, noise: float = 0.0, seed: int = 0):
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        self.state = state
        self.noise = noise
        self.seed = seed
        self.provider_id = "mock-oracle" if noise == 0 else f"mock-oracle:noise={noise}:seed={seed}"

    def complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(mock_oracle(request, self.state, self.noise, self.seed), self.provider_id)


def cache_key(provider_id: str, request: ChatRequest) -> str:
    material = json.dumps(
        [provider_id, request.model, float(request.temperature), request.system_text, request.user_text],
        ensure_ascii=False,
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ResponseCache:
    """One JSON file per request digest; writes go through a temp file and rename."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def path_for(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self.path_for(key)
        try:
            with open(path, encoding="utf-8") as fh:
                entry = json.load(fh)
            if entry["key"] != key or not isinstance(entry["response"]["text"], str):
                raise ValueError("key mismatch")
            return entry["response"]["text"]
        except FileNotFoundError:
            return None
        except (OSError, ValueError, KeyError, TypeError):
            log.warning("ignoring corrupt cache entry %s", path)
            return None

    def put(self, key: str, provider_id: str, request: ChatRequest, response: ChatResponse) -> None:
        entry = {
            "key": key,
            "provider": provider_id,
            "request": {
                "model": request.model,
                "temperature": request.temperature,
                "max_output_tokens": request.max_output_tokens,
                "system_text": request.system_text,
                "user_text": request.user_text,
            },
            "response": {"text": response.text},
        }
        path = self.path_for(key)
        with self._write_lock:
            tmp = path.with_name(f".{path.name}.{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(entry, ensure_ascii=False, indent=1), encoding="utf-8")
            os.replace(tmp, path)


def cached_complete(cache: ResponseCache, provider: LLMProvider, request: ChatRequest) -> ChatResponse:
    key = cache_key(provider.provider_id, request)
    text = cache.get(key)
    if text is not None:
        return ChatResponse(text, provider.provider_id, cached=True)
    response = provider.complete(request)
    cache.put(key, provider.provider_id, request, response)
    return response


class CachedProvider:
    """Wrap a provider so every call goes through :func:`cached_complete`."""

    def __init__(self, provider: LLMProvider, cache: ResponseCache):
        self.inner = provider
        self.cache = cache
        self.provider_id = provider.provider_id

    def complete(self, request: ChatRequest) -> ChatResponse:
        return cached_complete(self.cache, self.inner, request)


class BoundedProvider:
    """Limit concurrent in-flight calls to ``provider``."""

    def __init__(self, provider: LLMProvider, max_inflight: int = 4):
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        self.inner = provider
        self.provider_id = provider.provider_id
        self._slots = threading.BoundedSemaphore(max_inflight)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._slots:
            return self.inner.complete(request)


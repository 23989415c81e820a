"""Query-side embedding sources used when a vector is not precomputed.

The engine never runs a neural encoder. A compensatory query, which only
exists at run time, is embedded by (in order) an external embedding
endpoint, a precomputed variant store, or :class:`HashProjectionEmbedder`.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
import time
from collections import Counter
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from hive_retrieval.errors import MalformedResponseError, MissingCredentialError, MissingEmbeddingError
from hive_retrieval.ingestion import ORIGINAL_VARIANT, EmbeddingStore, QueryRecord, variant_key
from hive_retrieval.llm import post_json_with_retries

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class HashProjectionEmbedder:
    """Bag-of-tokens text embedding via seeded random projection.

    Every token maps to a fixed Gaussian vector drawn from a generator
    seeded by ``(seed, hash(token))``; a text embeds to the count-weighted
    sum of its token vectors. Cosine between two embeddings then tracks
    their lexical overlap, with noise of order ``1/sqrt(dim)``.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def identity(self) -> str:
        return f"hash-projection:dim={self.dim}:seed={self.seed}"

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
            vec = np.random.default_rng([self.seed, h]).standard_normal(self.dim)
            vec.flags.writeable = False
            with self._lock:
                self._cache.setdefault(token, vec)
        return vec

    def embed(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim)
        for token, count in sorted(Counter(tokenize(text)).items()):
            out += count * self.token_vector(token)
        return out

    def embed_many(self, texts: Iterable[str]) -> np.ndarray:
        return np.array([self.embed(t) for t in texts]).reshape(-1, self.dim)


class EmbeddingEndpoint:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        api_key: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 5,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        if not self.api_key:
            raise MissingCredentialError(f"no API credential: set the {api_key_env} environment variable")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    @property
    def identity(self) -> str:
        return f"embedding-endpoint:{self.base_url}:{self.model}"

    def embed(self, text: str) -> np.ndarray:
        body, _ = post_json_with_retries(
            self._client,
            f"{self.base_url}/embeddings",
            {"model": self.model, "input": [text]},
            {"Authorization": f"Bearer {self.api_key}"},
            self.max_retries,
            self.backoff,
            30.0,
            self._sleep,
        )
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponseError("unexpected embeddings payload") from exc
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise MalformedResponseError("embedding is not a finite 1-d vector")
        return vec


def compensatory_variant(text: str) -> str:
    return "compensatory:" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class EmbeddingResolver:
    """Find the vector for an original query or a compensatory query text.

    Originals come from the precomputed query store when one is given
    (a miss is an error); otherwise from the endpoint or hash embedder.
    Compensatory texts try endpoint, then the store's variant keys, then
    the hash embedder.
    """

    def __init__(
        self,
        query_store: EmbeddingStore | None = None,
        endpoint: EmbeddingEndpoint | None = None,
        fallback: HashProjectionEmbedder | None = None,
    ):
        self.query_store = query_store
        self.endpoint = endpoint
        self.fallback = fallback

    def describe(self) -> dict:
        return {
            "query_store": None if self.query_store is None else len(self.query_store),
            "endpoint": None if self.endpoint is None else self.endpoint.identity,
            "fallback": None if self.fallback is None else self.fallback.identity,
        }

    def original(self, query: QueryRecord, text: str) -> np.ndarray:
        if self.query_store is not None:
            vec = self.query_store.get(variant_key(query.query_id, ORIGINAL_VARIANT))
            if vec is not None:
                return vec
            if self.endpoint is None:
                raise MissingEmbeddingError(f"no embedding for query {query.query_id!r}")
        if self.endpoint is not None:
            return self.endpoint.embed(text)
        if self.fallback is not None:
            return self.fallback.embed(text)
        raise MissingEmbeddingError(f"no embedding source for query {query.query_id!r}")

    def compensatory(self, query: QueryRecord, text: str) -> tuple[np.ndarray, str]:
        variant = compensatory_variant(text)
        if self.endpoint is not None:
            return self.endpoint.embed(text), variant
        if self.query_store is not None:
            vec = self.query_store.get(variant_key(query.query_id, variant))
            if vec is not None:
                return vec, variant
        if self.fallback is not None:
            return self.fallback.embed(text), variant
        raise MissingEmbeddingError(
            f"no embedding for compensatory query of {query.query_id!r} ({variant})"
        )


def embed_store(embedder: HashProjectionEmbedder, ids: Sequence[str], texts: Sequence[str],
                kind: str) -> EmbeddingStore:
    return EmbeddingStore(tuple(ids), embedder.embed_many(texts), kind)

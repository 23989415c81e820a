"""Two-pass, LLM-assisted dense retrieval over text corpora.

The engine wraps any base retriever (here: exact cosine search over
precomputed embeddings) with four stages: probe retrieval, compensatory
query synthesis, secondary retrieval and LLM verification/reranking.
"""

from hive_retrieval.errors import (
    ConfigError,
    HiveError,
    IngestionError,
    InvariantError,
    MissingCredentialError,
    ProviderError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "HiveError",
    "IngestionError",
    "InvariantError",
    "MissingCredentialError",
    "ProviderError",
    "__version__",
]

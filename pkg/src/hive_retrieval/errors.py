"""Exception hierarchy.

Each family carries the CLI exit code it maps to, so the command line
can report config, ingestion, provider and invariant failures distinctly.
"""

from __future__ import annotations


class HiveError(Exception):
    exit_code = 1


class ConfigError(HiveError):
    """Invalid configuration or incompatible inputs (e.g. dimension mismatch)."""

    exit_code = 2


class DimensionMismatchError(ConfigError):
    pass


class IngestionError(HiveError):
    """A data file could not be parsed or failed validation."""

    exit_code = 3

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class DegenerateInputError(IngestionError):
    """Input that is well-formed but unusable, such as a zero-magnitude vector."""


class MissingEmbeddingError(IngestionError):
    pass


class ProviderError(HiveError):
    exit_code = 4


class AuthenticationError(ProviderError):
    pass


class MissingCredentialError(ConfigError, AuthenticationError):
    """No API key configured; caught before any network call, so it exits as a config error."""


class RateLimitError(ProviderError):
    pass


class TransportError(ProviderError):
    pass


class MalformedResponseError(ProviderError):
    pass


class OracleError(ProviderError):
    """The mock oracle received a request it does not recognise."""


class InvariantError(HiveError):
    exit_code = 5

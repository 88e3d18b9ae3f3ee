from __future__ import annotations


class LengthcastError(Exception):
    """Base exception for toolkit failures."""


class UsageError(LengthcastError):
    """Raised when a caller supplies invalid options or an unusable input set."""


class DomainError(LengthcastError, ValueError):
    """Raised when numeric inputs fall outside an operation's domain."""


class UndefinedCorrelationError(DomainError):
    """Raised when a correlation is requested over constant inputs."""

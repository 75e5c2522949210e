"""Exception types raised across the package."""

from __future__ import annotations


class FerError(Exception):
    """Base class for domain errors (mapped to exit status 1 by the CLI)."""


# dataset
class EmptyClass(FerError, ValueError):
    pass


class InsufficientSamples(FerError, ValueError):
    pass


class DegenerateSplit(FerError, ValueError):
    pass


class FormatError(FerError, ValueError):
    pass


class UnknownLabel(FerError, ValueError):
    pass


# preprocess
class ChannelsMismatch(FerError, ValueError):
    pass


class DimensionMismatch(FerError, ValueError):
    pass


class RangeError(FerError, ValueError):
    pass


# model
class ShapeMismatch(FerError, ValueError):
    def __init__(self, message: str, offending: dict | None = None):
        super().__init__(message)
        self.offending = dict(offending or {})


class MissingParameter(FerError, KeyError):
    def __init__(self, message: str, missing: list[str] | None = None):
        super().__init__(message)
        self.missing = list(missing or [])

    def __str__(self) -> str:
        return self.args[0]


# training
class InvalidTarget(FerError, ValueError):
    pass


class InvalidAccumulation(FerError, ValueError):
    pass


class DivergenceError(FerError, RuntimeError):
    pass


# metrics
class EmptyEvaluation(FerError, ValueError):
    pass


class LengthMismatch(FerError, ValueError):
    pass


class ConfigError(Exception):
    """Invalid or incomplete run configuration; ``key`` is the dotted path."""

    def __init__(self, key: str, message: str = ""):
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)

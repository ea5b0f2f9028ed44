"""
errors.py – exception hierarchy

Everything raised on purpose derives from RetrievalError so the CLI can
turn it into a one-line message and exit code 1.
"""
from __future__ import annotations


class RetrievalError(Exception):
    """Base class for all deliberate failures."""


class ParseError(RetrievalError):
    """Malformed input line."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class ValidationError(RetrievalError, ValueError):
    """Data violates an invariant (duplicate id, unresolved passage, ...)."""


class ArgumentError(RetrievalError, ValueError):
    """Bad call argument or configuration value."""


class NumericError(RetrievalError, ArithmeticError):
    """Non-finite input or a degenerate norm."""


class TrainingError(RetrievalError):
    """Optimisation failed; `step` is the global step index."""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")


class FormatError(RetrievalError):
    """Binary artifact with wrong magic, version or length."""

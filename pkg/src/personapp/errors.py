"""Exception hierarchy for personapp.

Library code raises these; only the CLI turns them into process exit codes:
- UsageError: 1
- DataError: 2
- NumericError (and ShapeError): 3
"""

from __future__ import annotations

from typing import Any


class PersonappError(Exception):
    """Root of every error raised deliberately by this package."""

    exit_code: int = 1


class UsageError(PersonappError):
    """Bad flags, unknown config keys or invalid config values."""

    exit_code = 1


class DataError(PersonappError):
    """Malformed files or violated event-core invariants."""

    exit_code = 2

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None) -> None:
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class NumericError(PersonappError):
    """Non-finite values or estimators that cannot produce a usable number."""

    exit_code = 3

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        self.diagnostics = dict(diagnostics or {})
        self.message = message
        super().__init__(message)

    def __str__(self) -> str:
        if not self.diagnostics:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
        return f"{self.message} [{details}]"


class ShapeError(NumericError, ValueError):
    """Operand shapes incompatible with a diffgraph primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(s) for s in shapes)
        super().__init__(f"shape mismatch in {op}: {rendered}")

"""Evidence and verdict data structures for statistical claims.

- Evidence: concrete numbers bound to a claim's symbols
- Verdict: the possible outcomes of a falsification attempt
- VerdictResult: verdict, evidence and the reasoning trace
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

import sympy as sp

if TYPE_CHECKING:
    from .claims import FalsificationForm


class Verdict(Enum):
    """The outcome of a falsification attempt.

    KILLED: the numbers contradict the claim
    SURVIVED: the numbers are consistent with the claim
    UNCERTAIN: the claim could not be evaluated (missing or non-finite evidence)
    """

    KILLED = "KILLED"
    SURVIVED = "SURVIVED"
    UNCERTAIN = "UNCERTAIN"

    def __str__(self) -> str:
        return self.value


@dataclass
class Evidence:
    """Concrete numbers for a claim.

    Example:
        >>> e = Evidence(
        ...     bindings={"estimate": 0.52, "reference": 0.5, "se": 0.01},
        ...     source="predict_time over 100 seeds",
        ... )
    """

    bindings: dict[str, Any]
    """Symbol name to value."""

    source: str = ""
    """Where the numbers came from."""

    metadata: dict[str, Any] = field(default_factory=dict)

    def to_sympy(self) -> dict[sp.Symbol, Any]:
        return {sp.Symbol(name): value for name, value in self.bindings.items()}

    def finite(self) -> bool:
        """True when every numeric binding is finite."""
        for value in self.bindings.values():
            if isinstance(value, (int, float)) and not math.isfinite(value):
                return False
        return True


@dataclass
class VerdictResult:
    """The complete result of one falsification attempt."""

    verdict: Verdict
    form: FalsificationForm | None = None
    evidence: Evidence | None = None
    trace: list[str] = field(default_factory=list)
    reasoning: str = ""

    @property
    def survived(self) -> bool:
        return self.verdict is Verdict.SURVIVED

    def add_trace(self, step: str) -> None:
        self.trace.append(step)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready summary, as written into CLI `verdicts` blocks."""
        return {
            "verdict": str(self.verdict),
            "claim": self.form.description if self.form is not None else "",
            "bindings": {k: float(v) for k, v in (self.evidence.bindings if self.evidence else {}).items()},
            "reasoning": self.reasoning,
        }

    def __str__(self) -> str:
        lines = [f"Verdict: {self.verdict}"]
        if self.reasoning:
            lines.append(f"Reasoning: {self.reasoning}")
        if self.evidence and self.evidence.bindings:
            lines.append(f"Evidence: {self.evidence.bindings}")
        return "\n".join(lines)

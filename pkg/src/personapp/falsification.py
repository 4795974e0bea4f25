"""Falsification engine for numeric claims.

- falsify(): decide a claim against evidence, with a reasoning trace
- quick_check(): keyword-binding shortcut
- claim(): context manager collecting evidence and deciding on exit
- verified(): decorator turning a KILLED verdict into an AssertionError
"""

from __future__ import annotations

import functools
import logging
from collections.abc import Callable, Generator
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, TypeVar

import sympy as sp

from .verdicts import Evidence, Verdict, VerdictResult

if TYPE_CHECKING:
    from .claims import Claim, FalsificationForm

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])


# ---------------------------------------------------------------------------
# Core falsification
# ---------------------------------------------------------------------------


def _substitute(form: FalsificationForm, evidence: Evidence) -> sp.Basic:
    return form.formula.subs(evidence.to_sympy())


def _evaluate(substituted: sp.Basic) -> bool | None:
    """True if the falsification condition holds, False if not, None if undecided."""
    simplified = sp.simplify(substituted)
    if simplified is sp.true:
        return True
    if simplified is sp.false:
        return False
    if isinstance(simplified, sp.Rel) and not simplified.free_symbols:
        try:
            return bool(simplified)
        except TypeError:
            return None
    return None


def falsify(claim: Claim, evidence: Evidence) -> VerdictResult:
    """Decide a claim against evidence.

    Missing or non-finite bindings give UNCERTAIN rather than a verdict.
    """
    result = VerdictResult(verdict=Verdict.UNCERTAIN)

    result.add_trace(f"Constructing falsification form for: {claim.statement}")
    form = claim.falsify()
    result.form = form
    result.add_trace(f"Falsification form: {form.description}")

    result.add_trace(f"Evidence bindings: {evidence.bindings}")
    result.evidence = evidence

    missing = {s.name for s in form.free_symbols if s.name not in evidence.bindings}
    if missing:
        result.reasoning = f"Missing evidence for: {sorted(missing)}"
        result.add_trace(f"Cannot evaluate: missing {sorted(missing)}")
        return result
    if not evidence.finite():
        result.reasoning = "Non-finite evidence"
        result.add_trace("Cannot evaluate: non-finite binding")
        return result

    substituted = _substitute(form, evidence)
    result.add_trace(f"Substituted formula: {substituted}")
    outcome = _evaluate(substituted)
    result.add_trace(f"Evaluation result: {outcome}")

    if outcome is True:
        result.verdict = Verdict.KILLED
        result.reasoning = f"Falsification condition met: {form.description}"
    elif outcome is False:
        result.verdict = Verdict.SURVIVED
        result.reasoning = "Falsification condition not met with given evidence"
    else:
        result.reasoning = f"Could not evaluate formula: {substituted}"
    logger.debug("%s -> %s", claim.statement, result.verdict)
    return result


def quick_check(claim: Claim, **bindings: Any) -> Verdict:
    return falsify(claim, Evidence(bindings=bindings)).verdict


# ---------------------------------------------------------------------------
# Testing API
# ---------------------------------------------------------------------------


@dataclass
class ClaimContext:
    """Collects evidence for one claim; decided when the `claim` block exits."""

    claim: Claim
    evidence: Evidence = field(default_factory=lambda: Evidence(bindings={}))
    result: VerdictResult | None = None

    def bind(self, **bindings: Any) -> None:
        self.evidence.bindings.update(bindings)

    def observe(self, name: str, value: Any) -> Any:
        """Record a value and return it unchanged."""
        self.evidence.bindings[name] = value
        return value


@contextmanager
def claim(c: Claim) -> Generator[ClaimContext, None, None]:
    """Context manager that decides `c` on exit.

    Example:
        >>> with claim(StandardErrorBand("mean gap is 1/rate")) as ctx:
        ...     ctx.bind(estimate=0.51, reference=0.5, se=0.01)
        >>> ctx.result.verdict
        <Verdict.SURVIVED: 'SURVIVED'>
    """
    ctx = ClaimContext(claim=c)
    try:
        yield ctx
    finally:
        ctx.result = falsify(ctx.claim, ctx.evidence)


def verified(claim_factory: Callable[..., Claim]) -> Callable[[F], F]:
    """The decorated function returns bindings; a KILLED verdict raises AssertionError."""

    def decorator(func: F) -> F:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> VerdictResult:
            c = claim_factory()
            bindings = func(*args, **kwargs)
            if bindings is None:
                bindings = {}
            elif not isinstance(bindings, dict):
                bindings = {"estimate": bindings}
            evidence = Evidence(bindings=bindings, source=f"function: {func.__name__}")
            result = falsify(c, evidence)
            if result.verdict == Verdict.KILLED:
                raise AssertionError(
                    f"Claim KILLED: {c.statement}\nReasoning: {result.reasoning}\nEvidence: {evidence.bindings}"
                )
            return result

        return wrapper  # type: ignore[return-value]

    return decorator

"""Falsifiable numeric claims.

Each claim builds a sympy formula over named symbols whose satisfaction
kills the claim. Binding measured numbers to the symbols and simplifying
decides the verdict (see `falsification`).

- Tolerance: estimate within a relative tolerance of an exact reference
- StandardErrorBand: |estimate - reference| <= k * se
- Improvement: arm A beats arm B by more than k combined standard errors
- CoinFlipBand: an observed rate within k * sqrt(p (1 - p) / n) of p
- Threshold: a metric on the right side of a fixed threshold
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Literal, Protocol, runtime_checkable

import sympy as sp

Direction = Literal[">", ">=", "<", "<="]


@runtime_checkable
class Claim(Protocol):
    """Anything that can construct its own falsification form."""

    @property
    def statement(self) -> str: ...

    def falsify(self) -> FalsificationForm: ...


@dataclass(frozen=True)
class FalsificationForm:
    """A formula that, if satisfied, falsifies a claim."""

    formula: sp.Basic
    """The condition under which the claim is KILLED."""

    free_symbols: frozenset[sp.Symbol] = field(default_factory=frozenset)
    """Symbols that evidence must bind."""

    description: str = ""

    def check(self, **bindings: Any) -> bool | None:
        """True if the condition holds (claim KILLED), False if not, None if undecided."""
        substituted = self.formula.subs({sp.Symbol(k): v for k, v in bindings.items()})
        simplified = sp.simplify(substituted)
        if simplified is sp.true:
            return True
        if simplified is sp.false:
            return False
        return None


def _form(formula: sp.Basic, description: str) -> FalsificationForm:
    return FalsificationForm(formula=formula, free_symbols=frozenset(formula.free_symbols), description=description)


@dataclass(frozen=True)
class Tolerance:
    """An estimate matches an exact reference to a relative tolerance.

    Example:
        >>> c = Tolerance("MC log-likelihood matches n log(rate) - rate T", rel_tol=1e-2)
        >>> form = c.falsify()  # |estimate - reference| > 0.01 |reference| + abs_tol
    """

    statement: str
    rel_tol: float = 1e-6
    abs_tol: float = 0.0

    def falsify(self) -> FalsificationForm:
        est, ref = sp.symbols("estimate reference")
        formula = sp.Abs(est - ref) > self.rel_tol * sp.Abs(ref) + self.abs_tol
        return _form(formula, f"|estimate - reference| > {self.rel_tol} |reference| + {self.abs_tol}")


@dataclass(frozen=True)
class StandardErrorBand:
    """An estimate lies within k standard errors of a reference."""

    statement: str
    k: float = 3.0

    def falsify(self) -> FalsificationForm:
        est, ref, se = sp.symbols("estimate reference se")
        formula = sp.Abs(est - ref) > self.k * se
        return _form(formula, f"|estimate - reference| > {self.k} se")


@dataclass(frozen=True)
class Improvement:
    """Arm A beats arm B by more than k combined standard errors.

    Lower is better by default (losses, error rates); bindings are
    `a`, `b`, `se_a`, `se_b`.
    """

    statement: str
    k: float = 3.0
    lower_is_better: bool = True
    margin: float = 0.0
    """Extra absolute gap required on top of the k-SE band."""

    def falsify(self) -> FalsificationForm:
        a, b, se_a, se_b = sp.symbols("a b se_a se_b")
        gap = b - a if self.lower_is_better else a - b
        formula = sp.Not(gap > self.k * sp.sqrt(se_a**2 + se_b**2) + self.margin)
        word = "below" if self.lower_is_better else "above"
        return _form(formula, f"a is not {word} b by more than {self.k} combined se + {self.margin}")


@dataclass(frozen=True)
class CoinFlipBand:
    """An observed rate over n trials is within k binomial standard errors of p."""

    statement: str
    p: float = 0.5
    k: float = 3.0

    def falsify(self) -> FalsificationForm:
        rate, n = sp.symbols("rate n")
        p = sp.Float(self.p)
        formula = sp.Abs(rate - p) > self.k * sp.sqrt(p * (1 - p) / n)
        return _form(formula, f"|rate - {self.p}| > {self.k} sqrt(p (1 - p) / n)")


@dataclass(frozen=True)
class Threshold:
    """A metric satisfies `metric <direction> threshold`."""

    statement: str
    metric: str = "value"
    threshold: float = 0.0
    direction: Direction = ">"

    def falsify(self) -> FalsificationForm:
        var = sp.Symbol(self.metric)
        expected = {
            ">": var > self.threshold,
            ">=": var >= self.threshold,
            "<": var < self.threshold,
            "<=": var <= self.threshold,
        }[self.direction]
        return _form(sp.Not(expected), f"not ({self.metric} {self.direction} {self.threshold})")

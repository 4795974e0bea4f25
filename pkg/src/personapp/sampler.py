"""Thinning sampler with dominance validation.

Candidates arrive as a homogeneous Poisson process of rate lambda_star on
[c, T) and a candidate at t is kept with probability lambda(t | H_t) /
lambda_star, its mark drawn from lambda_k / lambda. A finished sample is
probed at uniform times in [c, T); if the conditional intensity ever
exceeded lambda_star there, lambda_star is multiplied by the escalation
factor and the sample is regenerated from a fresh substream.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoders import Decoder, DecoderState
from .diffgraph import Node
from .errors import NumericError
from .events import Event, Sequence, sequence_to_record

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThinningConfig:
    """Dominating-rate settings."""

    lambda_star: float = 0.0
    """Initial dominating rate; 0 picks start_factor x the total intensity at c."""

    start_factor: float = 10.0
    escalation: float = 2.0
    validation_points: int = 1000
    max_escalations: int = 20
    max_events: int = 100_000
    """Upper bound on accepted events in one sample."""

    def __post_init__(self) -> None:
        if self.lambda_star < 0.0 or self.start_factor <= 0.0:
            raise ValueError(f"dominating rate settings must be positive: {self}")
        if self.escalation <= 1.0:
            raise ValueError(f"escalation must exceed 1, got {self.escalation}")
        if min(self.validation_points, self.max_escalations, self.max_events) < 1:
            raise ValueError(f"counts must be positive: {self}")


@dataclass(frozen=True)
class SampleResult:
    sequence: Sequence
    lambda_star: float
    escalations: int


class _DominanceViolation(Exception):
    def __init__(self, t: float, rate: float) -> None:
        super().__init__(f"lambda({t})={rate} exceeds the dominating rate")
        self.t = t
        self.rate = rate


def _condition(decoder: Decoder, z: Node | None, events: Iterable[Event]) -> DecoderState:
    state = decoder.init_state(z)
    for ev in events:
        state = decoder.update_state(state, ev, z)
    return state


def validate_dominance(
    decoder: Decoder,
    z: Node | None,
    sampled: Sequence,
    lambda_star: float,
    n_points: int,
    rng: np.random.Generator,
    start: float = 0.0,
) -> bool:
    """True iff lambda(t | sampled history) <= lambda_star at n_points uniform times in [start, T)."""
    probes = np.sort(rng.uniform(start, sampled.horizon, size=n_points))
    times = sampled.times
    # H_t is left-continuous: a probe at an event time uses the state before it.
    segment = np.searchsorted(times, probes, side="left")
    state = decoder.init_state(z)
    conditioned = 0
    for j in np.unique(segment):
        while conditioned < j:
            state = decoder.update_state(state, sampled.events[conditioned], z)
            conditioned += 1
        totals = decoder.rates(state, probes[segment == j]).value.sum(axis=0)
        if np.any(totals > lambda_star):
            return False
    return True


def _generate(
    decoder: Decoder,
    z: Node | None,
    prefix: Sequence,
    start: float,
    horizon: float,
    lambda_star: float,
    cfg: ThinningConfig,
    rng: np.random.Generator,
) -> Sequence:
    state = _condition(decoder, z, prefix.events)
    events = list(prefix.events)
    t = start
    while True:
        t += rng.exponential(1.0 / lambda_star)
        if t >= horizon:
            break
        rates = decoder.rates(state, np.array([t])).value[:, 0]
        total = float(rates.sum())
        if total > lambda_star:
            raise _DominanceViolation(t, total)
        if rng.uniform() * lambda_star < total:
            ev = Event(t, int(rng.choice(rates.size, p=rates / total)))
            events.append(ev)
            state = decoder.update_state(state, ev, z)
            if len(events) - len(prefix) > cfg.max_events:
                raise NumericError("thinning accepted too many events", {"max_events": cfg.max_events, "t": t})
    return prefix.with_events(events, horizon=horizon)


def thin(
    decoder: Decoder,
    z: Node | None,
    prefix: Sequence,
    window: tuple[float, float],
    cfg: ThinningConfig,
    rng: np.random.Generator,
) -> SampleResult:
    """Sample events in [c, T) after conditioning on `prefix`, with escalation."""
    c, horizon = window
    if not 0.0 <= c < horizon:
        raise ValueError(f"window ({c}, {horizon}) is empty")
    if prefix.events and prefix.events[-1].time > c:
        raise ValueError(f"prefix runs past the window start {c}")
    lambda_star = cfg.lambda_star
    if lambda_star <= 0.0:
        at_start = decoder.rates(_condition(decoder, z, prefix.events), np.array([c])).value.sum()
        lambda_star = cfg.start_factor * max(float(at_start), 1e-12)

    gen = rng
    for escalation in range(cfg.max_escalations + 1):
        if escalation:
            gen = rng.spawn(1)[0]
        try:
            sample = _generate(decoder, z, prefix, c, horizon, lambda_star, cfg, gen)
        except _DominanceViolation as exc:
            logger.warning("dominance violated during generation at t=%.4f; escalating lambda*=%g", exc.t, lambda_star)
            lambda_star *= cfg.escalation
            continue
        if validate_dominance(decoder, z, sample, lambda_star, cfg.validation_points, gen, start=c):
            return SampleResult(sample, lambda_star, escalation)
        logger.warning("dominance validation failed; escalating lambda*=%g", lambda_star)
        lambda_star *= cfg.escalation
    raise NumericError(
        "thinning escalation exhausted",
        {"lambda_star": lambda_star, "escalations": cfg.max_escalations, "clamps": decoder.clamps.count},
    )


def sample_sequence(
    decoder: Decoder,
    z: Node | None,
    prefix: Sequence,
    window: tuple[float, float],
    cfg: ThinningConfig,
    rng: np.random.Generator,
) -> Sequence:
    """Prefix plus a thinned continuation over [c, T)."""
    return thin(decoder, z, prefix, window, cfg, rng).sequence


def save_samples(results: Iterable[SampleResult], path: str | Path, model_id: str, seed: int) -> None:
    """JSONL with a provenance object (model id, seed, lambda* used) per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in results:
            provenance = {"model": model_id, "seed": seed, "lambda_star": r.lambda_star, "escalations": r.escalations}
            fh.write(json.dumps(sequence_to_record(r.sequence, provenance=provenance)) + "\n")

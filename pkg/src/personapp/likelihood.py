"""Sequence log-likelihood, its SCE / PP+ / PP- decomposition, and the beta-ELBO.

    log p(H) = sum_i log lambda_{k_i}(t_i) - int_0^T lambda(t) dt

The integral is a stratified Monte-Carlo estimate: uniform draws inside
each inter-event segment, allocated in proportion to segment length with at
least one per non-empty segment. Intensities at event times use the state
from just before the event. From the same draw,

    SCE = -(1/n) sum_i log(lambda_{k_i} / lambda)    (mark cross-entropy)
    PP+ = -(1/n) sum_i log lambda(t_i)               (positive evidence)
    PP- = (1/T) int_0^T lambda                       (negative evidence)

so that -log p = n (SCE + PP+) + T PP- holds exactly per draw.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence as SequenceOf
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from . import diffgraph as dg
from .decoders import Decoder
from .diffgraph import Node
from .encoder import (
    SequenceEncoder,
    build_posterior,
    kl_estimate,
    log_density,
    prior_log_density,
    sample_z,
)
from .events import Sequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MCConfig:
    """Monte-Carlo sample counts."""

    train_samples: int = 150
    """Compensator draws per sequence during training."""

    eval_samples: int = 500
    """Compensator draws per sequence for held-out evaluation."""

    train_z_samples: int = 1
    """z draws per sequence for the ELBO expectation during training."""

    eval_z_samples: int = 5
    """z draws per sequence for held-out evaluation."""

    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.train_samples, self.eval_samples, self.train_z_samples, self.eval_z_samples) < 1:
            raise ValueError(f"MC sample counts must be positive: {self}")


@dataclass(frozen=True)
class LLBreakdown:
    """Log-likelihood of one sequence and its three normalized components."""

    log_lik: float
    sce: float
    pp_plus: float
    pp_minus: float
    n_events: int
    t_end: float
    compensator_se: float = 0.0
    """Monte-Carlo standard error of the compensator estimate."""

    graph: Node | None = field(default=None, repr=False, compare=False)
    """Differentiable log_lik, when built on a tape."""

    @property
    def nll(self) -> float:
        return -self.log_lik

    @property
    def compensator(self) -> float:
        return self.pp_minus * self.t_end

    def identity_residual(self) -> float:
        """-log p - (n (SCE + PP+) + T PP-); zero up to rounding."""
        return -self.log_lik - (self.n_events * (self.sce + self.pp_plus) + self.t_end * self.pp_minus)


@dataclass(frozen=True)
class TimePoint:
    """Decomposition of the negative log-likelihood of the prefix H_t."""

    t: float
    n_events: int
    sce: float | None
    pp_plus: float | None
    pp_minus: float


class ElboTerms(NamedTuple):
    value: Node
    breakdown: LLBreakdown
    kl: float


def allocate_samples(lengths: np.ndarray, total: int) -> np.ndarray:
    """Per-segment draw counts proportional to length, >= 1 for non-empty segments."""
    lengths = np.asarray(lengths, dtype=np.float64)
    span = lengths.sum()
    if span <= 0.0:
        return np.zeros(lengths.size, dtype=np.int64)
    counts = np.floor(total * lengths / span).astype(np.int64)
    counts[(lengths > 0.0) & (counts < 1)] = 1
    counts[lengths <= 0.0] = 0
    return counts


@dataclass
class _Trace:
    """Per-event log terms and per-draw compensator contributions of one pass."""

    log_mark: list[Node] = field(default_factory=list)
    log_total: list[Node] = field(default_factory=list)
    event_times: list[float] = field(default_factory=list)
    compensator: list[Node] = field(default_factory=list)
    draw_times: list[np.ndarray] = field(default_factory=list)
    draw_values: list[np.ndarray] = field(default_factory=list)
    variance: float = 0.0
    """Variance of the stratified compensator estimate."""

    def compensator_node(self) -> Node:
        if not self.compensator:
            return dg.constant(0.0)
        return dg.add_all(self.compensator)

    def compensator_until(self, t: float) -> float:
        """Draws at or before t only: an unbiased estimate of int_0^t lambda."""
        return float(sum(v[u <= t].sum() for u, v in zip(self.draw_times, self.draw_values)))


def _trace(decoder: Decoder, z: Node | None, seq: Sequence, n_samples: int, rng: np.random.Generator) -> _Trace:
    trace = _Trace()
    times = seq.times
    bounds = np.concatenate([[0.0], times, [seq.horizon]])
    counts = allocate_samples(np.diff(bounds), n_samples)
    state = decoder.init_state(z)
    n = len(seq)
    for j in range(n + 1):
        a, b, m = float(bounds[j]), float(bounds[j + 1]), int(counts[j])
        draws = np.sort(rng.uniform(a, b, size=m)) if m else np.empty(0)
        query = np.append(draws, times[j]) if j < n else draws
        if query.size:
            rates = decoder.rates(state, query)
            totals = dg.sum_rows(rates)
            if m:
                weight = (b - a) / m
                mask = np.zeros((query.size, 1))
                mask[:m, 0] = weight
                trace.compensator.append(dg.matmul(totals, dg.constant(mask)))
                per_draw = totals.value[0, :m] * weight
                trace.draw_times.append(draws)
                trace.draw_values.append(per_draw)
                if m > 1:
                    trace.variance += float(m * np.var(per_draw, ddof=1))
            if j < n:
                ev = seq.events[j]
                col = query.size - 1
                trace.log_mark.append(dg.log(dg.pick(rates, ev.mark, col)))
                trace.log_total.append(dg.log(dg.pick(totals, 0, col)))
                trace.event_times.append(ev.time)
        if j < n:
            state = decoder.update_state(state, seq.events[j], z)
    return trace


def _breakdown(trace: _Trace, seq: Sequence) -> LLBreakdown:
    n = len(seq)
    compensator = trace.compensator_node()
    if n:
        log_lik = dg.add_all(trace.log_mark) - compensator
        log_mark = float(sum(node.item() for node in trace.log_mark))
        log_total = float(sum(node.item() for node in trace.log_total))
        sce = -(log_mark - log_total) / n
        pp_plus = -log_total / n
    else:
        log_lik = -compensator
        sce = pp_plus = 0.0
    return LLBreakdown(
        log_lik=log_lik.item(),
        sce=sce,
        pp_plus=pp_plus,
        pp_minus=compensator.item() / seq.horizon,
        n_events=n,
        t_end=seq.horizon,
        compensator_se=float(np.sqrt(trace.variance)),
        graph=log_lik,
    )


def _rng(mc: MCConfig, rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(mc.seed)


def log_likelihood(
    decoder: Decoder,
    z: Node | None,
    seq: Sequence,
    mc: MCConfig,
    rng: np.random.Generator | None = None,
    *,
    training: bool = False,
) -> LLBreakdown:
    """log p(H | z) with a stratified Monte-Carlo compensator.

    The returned breakdown carries the differentiable log-likelihood in
    `graph`; SCE, PP+ and PP- come from the same compensator draw.
    """
    n_samples = mc.train_samples if training else mc.eval_samples
    return _breakdown(_trace(decoder, z, seq, n_samples, _rng(mc, rng)), seq)


def breakdown_over_time(
    decoder: Decoder,
    z: Node | None,
    seq: Sequence,
    grid: SequenceOf[float],
    mc: MCConfig,
    rng: np.random.Generator | None = None,
) -> list[TimePoint]:
    """SCE, PP+ and PP- of every prefix H_t, t in grid, from one shared pass.

    PP-(H_t) = (1/t) int_0^t lambda. SCE and PP+ are None while the prefix
    holds no events.
    """
    for t in grid:
        if not 0.0 < t <= seq.horizon:
            raise ValueError(f"grid time {t} outside (0, {seq.horizon}]")
    trace = _trace(decoder, z, seq, mc.eval_samples, _rng(mc, rng))
    log_mark = np.array([node.item() for node in trace.log_mark])
    log_total = np.array([node.item() for node in trace.log_total])
    times = np.asarray(trace.event_times)
    out = []
    for t in grid:
        n_t = int(np.searchsorted(times, t, side="right"))
        pp_minus = trace.compensator_until(t) / t
        if n_t == 0:
            out.append(TimePoint(t, 0, None, None, pp_minus))
            continue
        sce = -float(np.sum(log_mark[:n_t] - log_total[:n_t])) / n_t
        pp_plus = -float(np.sum(log_total[:n_t])) / n_t
        out.append(TimePoint(t, n_t, sce, pp_plus, pp_minus))
    return out


def sce_over_time(
    decoder: Decoder,
    z: Node | None,
    seq: Sequence,
    grid: SequenceOf[float],
    mc: MCConfig | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[float, float]]:
    """(t, SCE(H_t)) for the grid points whose prefix holds at least one event."""
    points = breakdown_over_time(decoder, z, seq, grid, mc or MCConfig(eval_samples=1), rng)
    return [(p.t, p.sce) for p in points if p.sce is not None]


def _mean_breakdown(parts: SequenceOf[LLBreakdown], graph: Node) -> LLBreakdown:
    first = parts[0]
    return LLBreakdown(
        log_lik=float(np.mean([p.log_lik for p in parts])),
        sce=float(np.mean([p.sce for p in parts])),
        pp_plus=float(np.mean([p.pp_plus for p in parts])),
        pp_minus=float(np.mean([p.pp_minus for p in parts])),
        n_events=first.n_events,
        t_end=first.t_end,
        compensator_se=float(np.sqrt(np.sum([p.compensator_se**2 for p in parts]))) / len(parts),
        graph=graph,
    )


def elbo(
    decoder: Decoder,
    encoder: SequenceEncoder | None,
    refs: SequenceOf[Sequence],
    target: Sequence,
    beta: float,
    mc: MCConfig,
    rng: np.random.Generator | None = None,
    *,
    training: bool = True,
) -> ElboTerms:
    """E_q(z|R)[log p(H | z)] - beta * KL(q(z|R) || N(0, I)).

    With no encoder (the decoder-only model) the objective is the plain
    log-likelihood and KL is 0. The breakdown is averaged over the z draws.
    """
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    rng = _rng(mc, rng)
    if encoder is None:
        part = log_likelihood(decoder, None, target, mc, rng, training=training)
        assert part.graph is not None
        return ElboTerms(part.graph, part, 0.0)
    n_z = mc.train_z_samples if training else mc.eval_z_samples
    q = build_posterior(encoder, refs)
    zs = [sample_z(q, rng)[0] for _ in range(n_z)]
    parts = [log_likelihood(decoder, z, target, mc, rng, training=training) for z in zs]
    graphs = [p.graph for p in parts if p.graph is not None]
    recon = graphs[0] if n_z == 1 else dg.add_all(graphs) / n_z
    kl = kl_estimate(q, zs)
    logger.debug("elbo over %d z draws: kl=%.5f beta=%g", n_z, kl.item(), beta)
    value = recon if beta == 0.0 else recon - beta * kl
    return ElboTerms(value, _mean_breakdown(parts, recon), kl.item())


def importance_weighted_log_likelihood(
    decoder: Decoder,
    encoder: SequenceEncoder,
    refs: SequenceOf[Sequence],
    target: Sequence,
    n_importance: int,
    mc: MCConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """log (1/S) sum_s p(H | z_s) p(z_s) / q(z_s), z_s ~ q(z | R).

    A tighter estimate of log p(H) than the ELBO at beta = 1.
    """
    if n_importance < 1:
        raise ValueError(f"n_importance must be positive, got {n_importance}")
    rng = _rng(mc, rng)
    q = build_posterior(encoder, refs)
    weights = np.empty(n_importance)
    for s in range(n_importance):
        z, _ = sample_z(q, rng)
        ll = log_likelihood(decoder, z, target, mc, rng).log_lik
        weights[s] = ll + prior_log_density(z).item() - log_density(q, z).item()
    return float(logsumexp(weights) - np.log(n_importance))

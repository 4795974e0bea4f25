"""Next-event prediction under the model's next-event density.

After conditioning on a prefix ending at t_i,

    p(t) = lambda(t) exp(-int_{t_i}^t lambda),   t > t_i

The expected time and the per-mark marginals int (lambda_k / lambda) p(t) dt
are estimated from one set of uniform points on (t_i, cap], where
cap = t_i + cap_gaps * (mean training gap). The inner compensator at each
point is a cumulative trapezoid over the same sorted points. The expected
time is normalized by the captured mass int p over (t_i, cap]; the mark
scores are not, and they sum to that mass.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence as SequenceOf
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .decoders import Decoder, DecoderState
from .diffgraph import Node
from .errors import NumericError
from .events import Dataset, Sequence, split_prefix
from .model import PersonalizedMTPP
from .seeding import substream
from .trainer import reference_set

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictConfig:
    """Monte-Carlo settings for next-event prediction."""

    mc_samples: int = 10_000
    """Uniform points shared by every integral of one prediction."""

    horizon_cap: float = 0.0
    """Absolute span past t_i; 0 uses cap_gaps * mean_gap."""

    cap_gaps: float = 10.0
    mean_gap: float = 1.0
    """Mean training inter-event gap."""

    z_samples: int = 5
    n_prefix: int = 10
    """Events conditioned on before predicting the next one."""

    min_mass: float = 1e-6
    max_refs: int = 8

    def __post_init__(self) -> None:
        if self.mc_samples < 1 or self.z_samples < 1 or self.n_prefix < 0:
            raise ValueError(f"sample counts must be positive: {self}")
        if self.horizon_cap < 0.0 or self.cap_gaps <= 0.0 or self.mean_gap <= 0.0:
            raise ValueError(f"cap settings must be positive: {self}")

    def cap(self, t_last: float) -> float:
        span = self.horizon_cap if self.horizon_cap > 0.0 else self.cap_gaps * self.mean_gap
        return t_last + span


@dataclass(frozen=True)
class DensityEstimate:
    value: float
    se: float


@dataclass(frozen=True)
class NextEventPrediction:
    """Shared-sample estimates for one prefix."""

    t_hat: float
    t_hat_se: float
    mark_scores: np.ndarray
    captured_mass: float
    cap: float

    @property
    def mark(self) -> int:
        return int(np.argmax(self.mark_scores))


@dataclass(frozen=True)
class _Integrals:
    time_moment: np.ndarray
    """Per-point W * u * p(u)."""

    mass: np.ndarray
    """Per-point W * p(u)."""

    scores: np.ndarray
    """(K,) marginal mark integrals."""


def condition(decoder: Decoder, z: Node | None, prefix: Sequence) -> DecoderState:
    state = decoder.init_state(z)
    for ev in prefix.events:
        state = decoder.update_state(state, ev, z)
    return state


def estimate_density(
    decoder: Decoder,
    state: DecoderState,
    t: float,
    n_samples: int,
    rng: np.random.Generator,
) -> DensityEstimate:
    """p(t) with an MC compensator over uniform points on (t_i, t], and its delta-method SE."""
    if t <= state.t_last:
        raise ValueError(f"density needs t > t_i={state.t_last}, got {t}")
    width = t - state.t_last
    u = rng.uniform(state.t_last, t, size=n_samples)
    lam = decoder.rates(state, np.append(u, t)).value.sum(axis=0)
    inner = lam[:-1] * width
    compensator = float(inner.mean())
    value = float(lam[-1] * math.exp(-compensator))
    se = value * float(inner.std(ddof=1)) / math.sqrt(n_samples) if n_samples > 1 else 0.0
    return DensityEstimate(value, se)


def next_event_density(
    decoder: Decoder,
    z: Node | None,
    state: DecoderState,
    t: float,
    n_samples: int = 10_000,
    rng: np.random.Generator | None = None,
) -> float:
    del z  # the state already carries z
    return estimate_density(decoder, state, t, n_samples, rng or np.random.default_rng(0)).value


def _integrals(decoder: Decoder, state: DecoderState, cap: float, n: int, rng: np.random.Generator) -> _Integrals:
    width = cap - state.t_last
    u = np.sort(rng.uniform(state.t_last, cap, size=n))
    grid = np.append(state.t_last, u)
    rates = decoder.rates(state, grid).value
    lam = rates.sum(axis=0)
    compensator = cumulative_trapezoid(lam, grid, initial=0.0)[1:]
    survival = np.exp(-compensator)
    density = lam[1:] * survival
    return _Integrals(
        time_moment=width * u * density,
        mass=width * density,
        scores=width * (rates[:, 1:] * survival).mean(axis=1),
    )


def _ratio_se(num: np.ndarray, den: np.ndarray, ratio: float) -> float:
    n = num.size
    if n < 2 or den.mean() <= 0.0:
        return 0.0
    return float(np.std(num - ratio * den, ddof=1) / (math.sqrt(n) * den.mean()))


def predict_next(
    decoder: Decoder,
    zs: SequenceOf[Node | None],
    prefix: Sequence,
    cfg: PredictConfig,
    rng: np.random.Generator,
) -> NextEventPrediction:
    """Bayes-risk estimates under the predictive density averaged over the z draws."""
    if not zs:
        raise ValueError("predict_next needs at least one z (None for decoder-only)")
    t_last = prefix.events[-1].time if prefix.events else 0.0
    cap = cfg.cap(t_last)
    parts = [_integrals(decoder, condition(decoder, z, prefix), cap, cfg.mc_samples, rng) for z in zs]
    num = np.mean([p.time_moment for p in parts], axis=0)
    den = np.mean([p.mass for p in parts], axis=0)
    mass = float(den.mean())
    if mass < cfg.min_mass:
        raise NumericError(
            "captured next-event mass below threshold",
            {"mass": mass, "cap": cap, "t_last": t_last, "clamps": decoder.clamps.count},
        )
    if mass < 0.5:
        logger.warning("%s: only %.3f of the next-event mass lies before cap=%.4f", prefix.seq_id, mass, cap)
    t_hat = float(num.mean()) / mass
    logger.debug("%s: cap=%.4f captured=%.4f t_hat=%.4f", prefix.seq_id, cap, mass, t_hat)
    return NextEventPrediction(
        t_hat=t_hat,
        t_hat_se=_ratio_se(num, den, t_hat),
        mark_scores=np.mean([p.scores for p in parts], axis=0),
        captured_mass=mass,
        cap=cap,
    )


def predict_time(decoder: Decoder, z: Node | None, prefix: Sequence, cfg: PredictConfig, rng: np.random.Generator) -> float:
    return predict_next(decoder, [z], prefix, cfg, rng).t_hat


def predict_mark_scores(decoder: Decoder, z: Node | None, prefix: Sequence, cfg: PredictConfig, rng: np.random.Generator) -> np.ndarray:
    return predict_next(decoder, [z], prefix, cfg, rng).mark_scores


def rank_of_true(scores: np.ndarray, k_true: int) -> int:
    """1-based rank of k_true under descending scores; ties go to the lower mark index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k_true < scores.size:
        raise ValueError(f"mark {k_true} outside [0, {scores.size})")
    s = scores[k_true]
    ahead = int(np.sum(scores > s)) + int(np.sum(scores[:k_true] == s))
    return ahead + 1


# ---------------------------------------------------------------------------
# Dataset-level prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRow:
    seq_id: str
    t_true: float
    t_hat: float
    l1: float
    k_true: int
    rank: int
    captured_mass: float


def predict_dataset(
    model: PersonalizedMTPP,
    dataset: Dataset,
    cfg: PredictConfig,
    seed: int = 0,
    *,
    threads: int = 1,
) -> list[PredictionRow]:
    """Predict event n_prefix + 1 of every sequence long enough to have one."""
    targets = [s for s in dataset.sequences() if len(s) > cfg.n_prefix]
    n_z = cfg.z_samples if model.personalized else 1

    def job(i: int) -> PredictionRow:
        seq = targets[i]
        rng = substream(seed, "predict", i)
        refs = reference_set(dataset, seq, cfg.max_refs, rng)
        prefix, rest = split_prefix(seq, cfg.n_prefix)
        truth = rest.events[0]
        pred = predict_next(model.decoder, model.draw_z(refs, rng, n_z), prefix, cfg, rng)
        return PredictionRow(
            seq_id=seq.seq_id,
            t_true=truth.time,
            t_hat=pred.t_hat,
            l1=abs(pred.t_hat - truth.time),
            k_true=truth.mark,
            rank=rank_of_true(pred.mark_scores, truth.mark),
            captured_mass=pred.captured_mass,
        )

    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(job, range(len(targets))))
    logger.info("predicted next events for %d of %d sequences", len(rows), dataset.n_sequences)
    return rows


def write_predictions(rows: SequenceOf[PredictionRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f.name for f in fields(PredictionRow)])
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


def next_event_metrics(rows: SequenceOf[PredictionRow]) -> dict[str, float]:
    """Mean L1 time error and mean true-mark rank, with standard errors."""
    if not rows:
        raise ValueError("no predictions to summarize")
    l1 = np.array([r.l1 for r in rows])
    rank = np.array([r.rank for r in rows], dtype=np.float64)
    n = len(rows)

    def se(v: np.ndarray) -> float:
        return float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    return {
        "n": float(n),
        "mean_l1": float(l1.mean()),
        "mean_l1_se": se(l1),
        "mean_rank": float(rank.mean()),
        "mean_rank_se": se(rank),
        "mean_captured_mass": float(np.mean([r.captured_mass for r in rows])),
    }

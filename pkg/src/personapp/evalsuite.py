"""Experiment protocols: source identification against a Gamma-Poisson
baseline, likelihood-decomposition curves over time, and sample quality
(Jaccard distance of mark sets, 1-D Wasserstein distance of times).
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Iterable
from collections.abc import Sequence as SequenceOf
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import gammaln
from scipy.stats import wasserstein_distance

from .claims import CoinFlipBand, Improvement
from .errors import DataError
from .events import Dataset, Sequence, split_fraction
from .falsification import falsify
from .likelihood import MCConfig, breakdown_over_time
from .model import PersonalizedMTPP
from .sampler import ThinningConfig, thin
from .seeding import substream
from .trainer import reference_set
from .verdicts import Evidence, VerdictResult

logger = logging.getLogger(__name__)

Evaluator = Callable[[Sequence, Sequence, np.random.Generator], float]
"""(reference, target, rng) -> log-likelihood of target given reference."""


# ---------------------------------------------------------------------------
# Source identification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceIdTrial:
    target: Sequence
    same_ref: Sequence
    diff_ref: Sequence

    def __post_init__(self) -> None:
        if self.same_ref.user_id != self.target.user_id:
            raise DataError(f"same_ref {self.same_ref.seq_id} is not from {self.target.user_id}")
        if self.diff_ref.user_id == self.target.user_id:
            raise DataError(f"diff_ref {self.diff_ref.seq_id} is from the target's user")
        if self.same_ref.seq_id == self.target.seq_id:
            raise DataError(f"target {self.target.seq_id} is its own reference")


@dataclass(frozen=True)
class SourceIdResult:
    errors: int
    n_trials: int

    @property
    def error_rate(self) -> float:
        return self.errors / self.n_trials

    @property
    def standard_error(self) -> float:
        p = self.error_rate
        return math.sqrt(p * (1.0 - p) / self.n_trials)


def truncate(seq: Sequence, n_events: int) -> Sequence:
    """First n_events events; the window ends at the last kept event."""
    if len(seq) <= n_events:
        return seq
    kept = seq.events[:n_events]
    return seq.with_events(kept, horizon=max(kept[-1].time, np.nextafter(0.0, 1.0)))


def make_trials(dataset: Dataset, n_trials: int, rng: np.random.Generator, truncate_to: int = 10) -> list[SourceIdTrial]:
    """Random (target, same-user reference, other-user reference) triples."""
    donors = [u for u in dataset.users if u.reference_sequences]
    eligible = [u for u in donors if len(u.reference_sequences) >= 2]
    if not eligible or len(donors) < 2:
        raise DataError("source identification needs a user with two sequences and a second user")
    trials = []
    for _ in range(n_trials):
        user = eligible[int(rng.integers(len(eligible)))]
        i, j = rng.choice(len(user.reference_sequences), size=2, replace=False)
        others = [u for u in donors if u.user_id != user.user_id]
        other = others[int(rng.integers(len(others)))]
        diff = other.reference_sequences[int(rng.integers(len(other.reference_sequences)))]
        trials.append(
            SourceIdTrial(
                target=truncate(user.reference_sequences[i], truncate_to),
                same_ref=user.reference_sequences[j],
                diff_ref=diff,
            )
        )
    return trials


def source_identification(evaluator: Evaluator, trials: SequenceOf[SourceIdTrial], seed: int = 0) -> SourceIdResult:
    """Error when the other-user reference scores at least as high; exact ties flip a coin.

    Both evaluations of a trial draw from identical generator states, so an
    evaluator that ignores the reference ties exactly.
    """
    if not trials:
        raise ValueError("no trials")
    errors = 0
    for i, trial in enumerate(trials):
        same = evaluator(trial.same_ref, trial.target, substream(seed, "srcid", i))
        diff = evaluator(trial.diff_ref, trial.target, substream(seed, "srcid", i))
        if diff > same or (diff == same and substream(seed, "srcid-tie", i).uniform() < 0.5):
            errors += 1
    result = SourceIdResult(errors, len(trials))
    logger.info("source identification: %d/%d errors (%.3f)", errors, len(trials), result.error_rate)
    return result


def model_evaluator(model: PersonalizedMTPP, mc: MCConfig) -> Evaluator:
    """Expected log p(target | z) under q(z | {reference})."""

    def evaluate(ref: Sequence, target: Sequence, rng: np.random.Generator) -> float:
        return model.objective([ref], target, 0.0, mc, rng, training=False).breakdown.log_lik

    return evaluate


# ---------------------------------------------------------------------------
# Gamma-Poisson baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaPoissonBaseline:
    """Homogeneous Poisson process with a Gamma(a, b) prior on its total rate."""

    a: float
    b: float

    def __post_init__(self) -> None:
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError(f"Gamma parameters must be positive: a={self.a}, b={self.b}")

    @classmethod
    def from_rate(cls, rate: float, strength: float) -> GammaPoissonBaseline:
        """Prior mean `rate` with `strength` pseudo time units of evidence."""
        return cls(a=strength * rate, b=strength)

    @property
    def mean(self) -> float:
        return self.a / self.b

    def posterior(self, ref: Sequence) -> GammaPoissonBaseline:
        return GammaPoissonBaseline(self.a + len(ref), self.b + ref.horizon)


def gamma_poisson_target_loglik(baseline: GammaPoissonBaseline, ref: Sequence, target: Sequence) -> float:
    """Marginal log-likelihood of the target under the posterior after `ref`.

    a' log b' + log G(a' + n') - log G(a') - (a' + n') log(b' + T')
    """
    post = baseline.posterior(ref)
    a, b = post.a, post.b
    n, T = len(target), target.horizon
    return float(a * math.log(b) + gammaln(a + n) - gammaln(a) - (a + n) * math.log(b + T))


def training_rate(dataset: Dataset) -> float:
    """Maximum-likelihood total rate: events over observed time."""
    seqs = list(dataset.sequences())
    span = sum(s.horizon for s in seqs)
    if span <= 0.0:
        raise DataError("cannot fit a rate to an empty dataset")
    return sum(len(s) for s in seqs) / span


def baseline_evaluator(baseline: GammaPoissonBaseline) -> Evaluator:
    def evaluate(ref: Sequence, target: Sequence, rng: np.random.Generator) -> float:
        return gamma_poisson_target_loglik(baseline, ref, target)

    return evaluate


def tune_baseline(
    train: Dataset,
    valid_trials: SequenceOf[SourceIdTrial],
    strengths: Iterable[float] = (0.1, 1.0, 10.0, 100.0),
    seed: int = 0,
) -> tuple[GammaPoissonBaseline, dict[float, float]]:
    """Pick the prior strength with the lowest validation error (first on ties)."""
    rate = training_rate(train)
    errors: dict[float, float] = {}
    best: GammaPoissonBaseline | None = None
    best_error = math.inf
    for s in strengths:
        candidate = GammaPoissonBaseline.from_rate(rate, s)
        err = source_identification(baseline_evaluator(candidate), valid_trials, seed).error_rate
        errors[float(s)] = err
        if err < best_error:
            best, best_error = candidate, err
    if best is None:
        raise ValueError("no strengths to tune over")
    logger.info("baseline strength errors: %s", errors)
    return best, errors


# ---------------------------------------------------------------------------
# Sample quality
# ---------------------------------------------------------------------------


def jaccard_distance(a: Iterable[int], b: Iterable[int]) -> float:
    """1 - |A & B| / |A | B| over distinct marks; 0 when both are empty."""
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return 1.0 - len(sa & sb) / len(union)


def sample_quality(real_suffix: Sequence, sampled_suffix: Sequence) -> tuple[float, float]:
    """(Jaccard distance of mark sets, Wasserstein distance of event times).

    Both empty gives (0, 0); exactly one empty leaves WD undefined (NaN).
    """
    jd = jaccard_distance(real_suffix.marks.tolist(), sampled_suffix.marks.tolist())
    if not len(real_suffix) and not len(sampled_suffix):
        return jd, 0.0
    if not len(real_suffix) or not len(sampled_suffix):
        return jd, math.nan
    return jd, float(wasserstein_distance(real_suffix.times, sampled_suffix.times))


@dataclass(frozen=True)
class SampleQualityRow:
    rho: float
    n: int
    mean_jd: float
    jd_se: float
    mean_wd: float
    wd_se: float
    n_wd_undefined: int


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    v = values[np.isfinite(values)]
    if not v.size:
        return math.nan, math.nan
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def sample_quality_table(
    model: PersonalizedMTPP,
    dataset: Dataset,
    rhos: SequenceOf[float],
    thinning: ThinningConfig,
    n_sequences: int | None = None,
    seed: int = 0,
    max_refs: int = 8,
) -> list[SampleQualityRow]:
    """Condition on the first rho of each test sequence, sample (pi, T], compare suffixes."""
    targets = list(dataset.sequences())[:n_sequences]
    rows = []
    for r_idx, rho in enumerate(rhos):
        jd, wd = [], []
        for i, seq in enumerate(targets):
            rng = substream(seed, "sample-quality", r_idx, i)
            prefix, rest, pi = split_fraction(seq, rho)
            refs = reference_set(dataset, seq, max_refs, rng)
            if pi < seq.horizon:
                (z,) = model.draw_z(refs, rng, 1)
                sampled = thin(model.decoder, z, prefix, (pi, seq.horizon), thinning, rng).sequence
                suffix = sampled.with_events(sampled.events[len(prefix):])
            else:
                # The prefix ends at T: nothing is left to sample.
                suffix = seq.with_events([])
            j, w = sample_quality(rest, suffix)
            jd.append(j)
            wd.append(w)
        wd_arr = np.array(wd)
        mean_jd, jd_se = _mean_se(np.array(jd))
        mean_wd, wd_se = _mean_se(wd_arr)
        rows.append(SampleQualityRow(float(rho), len(targets), mean_jd, jd_se, mean_wd, wd_se, int(np.sum(~np.isfinite(wd_arr)))))
        logger.info("rho=%.2f: JD=%.4f WD=%.4f", rho, mean_jd, mean_wd)
    return rows


# ---------------------------------------------------------------------------
# Curves over time
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    t: float
    n_sequences: int
    sce: float
    pp_plus: float
    pp_minus: float


def aggregate_curves(
    model: PersonalizedMTPP,
    dataset: Dataset,
    grid: SequenceOf[float],
    mc: MCConfig,
    seed: int = 0,
    max_refs: int = 8,
) -> list[CurvePoint]:
    """Mean SCE, PP+ and PP- of H_t per grid time over sequences with an event by t."""
    if dataset.n_sequences == 0:
        raise DataError(f"cannot build curves on an empty {dataset.split} split")
    n_z = mc.eval_z_samples if model.personalized else 1
    per_point: list[list[tuple[float, float, float]]] = [[] for _ in grid]
    for i, seq in enumerate(dataset.sequences()):
        rng = substream(seed, "curves", i)
        refs = reference_set(dataset, seq, max_refs, rng)
        inside = [g for g, t in enumerate(grid) if t <= seq.horizon]
        if not inside:
            continue
        times = [grid[g] for g in inside]
        draws = [breakdown_over_time(model.decoder, z, seq, times, mc, rng) for z in model.draw_z(refs, rng, n_z)]
        for j, g in enumerate(inside):
            if draws[0][j].sce is None:
                continue
            per_point[g].append(
                (
                    float(np.mean([d[j].sce for d in draws])),
                    float(np.mean([d[j].pp_plus for d in draws])),
                    float(np.mean([d[j].pp_minus for d in draws])),
                )
            )
    out = []
    for t, values in zip(grid, per_point):
        if not values:
            out.append(CurvePoint(float(t), 0, math.nan, math.nan, math.nan))
            continue
        arr = np.array(values)
        out.append(CurvePoint(float(t), len(values), *(float(x) for x in arr.mean(axis=0))))
    return out


def write_rows(rows: SequenceOf[Any], path: str | Path) -> None:
    """CSV of a homogeneous list of dataclass rows."""
    if not rows:
        Path(path).write_text("")
        return
    names = [f.name for f in fields(rows[0])]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------


def compare_arms(
    statement: str,
    a: SequenceOf[float] | np.ndarray,
    b: SequenceOf[float] | np.ndarray,
    k: float = 3.0,
    lower_is_better: bool = True,
) -> VerdictResult:
    """Decide "arm a beats arm b by more than k combined standard errors"."""
    va, vb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)

    def se(v: np.ndarray) -> float:
        return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0

    evidence = Evidence(
        bindings={"a": float(va.mean()), "b": float(vb.mean()), "se_a": se(va), "se_b": se(vb)},
        source=statement,
    )
    return falsify(Improvement(statement, k=k, lower_is_better=lower_is_better), evidence)


def compare_rates(statement: str, a: SourceIdResult, b: SourceIdResult, margin: float = 0.05, k: float = 0.0) -> VerdictResult:
    """Decide "error rate a is below error rate b by more than margin (+ k combined SEs)"."""
    evidence = Evidence(
        bindings={"a": a.error_rate, "b": b.error_rate, "se_a": a.standard_error, "se_b": b.standard_error},
        source=statement,
    )
    return falsify(Improvement(statement, k=k, margin=margin), evidence)


def coin_flip_check(statement: str, result: SourceIdResult, k: float = 3.0) -> VerdictResult:
    """Decide "the error rate is within k binomial SEs of 0.5"."""
    evidence = Evidence(bindings={"rate": result.error_rate, "n": result.n_trials}, source=statement)
    return falsify(CoinFlipBand(statement, p=0.5, k=k), evidence)

"""Synthetic user populations with known generating processes.

Each user has a base rate, a mark distribution and optionally a shared
exponential self-excitation kernel:

    lambda(t) = mu + alpha * sum_{t_j < t} exp(-omega (t - t_j)),   alpha < omega
    p(k)      = mark_probs[k]                     (independent of time)

Mark distributions interpolate between uniform and a sparse Dirichlet draw
by `heterogeneity`; base rates are log-normal around `mean_rate` with a
spread that also scales with `heterogeneity`, so heterogeneity 0 makes
every user identical.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .events import Dataset, Event, LengthFilter, Sequence, Split, UserRecord, dataset_stats, save_dataset
from .seeding import substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Excitation:
    """Exponential kernel alpha * exp(-omega dt) shared by all marks."""

    alpha: float
    omega: float

    def __post_init__(self) -> None:
        if self.alpha < 0.0 or self.omega <= 0.0:
            raise ValueError(f"need alpha >= 0 and omega > 0, got {self}")
        if self.alpha >= self.omega:
            raise ValueError(f"branching ratio alpha/omega must be < 1, got {self.alpha / self.omega}")


@dataclass(frozen=True)
class SynthUserProfile:
    user_id: str
    base_rate: float
    mark_probs: np.ndarray = field(compare=False)
    excitation: Excitation | None = None

    def __post_init__(self) -> None:
        probs = np.asarray(self.mark_probs, dtype=np.float64)
        object.__setattr__(self, "mark_probs", probs)
        if self.base_rate <= 0.0:
            raise ValueError(f"base_rate must be positive, got {self.base_rate}")
        if probs.ndim != 1 or np.any(probs < 0.0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("mark_probs must be a probability vector")

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_rate": self.base_rate,
            "mark_probs": self.mark_probs.tolist(),
            "excitation": None if self.excitation is None else asdict(self.excitation),
        }


@dataclass(frozen=True)
class SynthConfig:
    """Population preset."""

    n_users: int = 300
    """Training users."""

    n_valid_users: int = 60
    n_test_users: int = 60
    seqs_per_user: int = 4
    K: int = 20
    T: float = 50.0
    mean_rate: float = 0.6
    rate_spread: float = 0.5
    """Log-normal sigma of base rates at heterogeneity 1."""

    heterogeneity: float = 0.8
    sparsity: float = 0.1
    """Dirichlet concentration of the user-specific mark component."""

    excitation_alpha: float = 0.0
    """0 disables self-excitation."""

    excitation_omega: float = 1.0
    min_events: int = 5
    max_events: int = 200
    max_attempts: int = 50
    """Redraws of a sequence that falls outside the length bounds."""

    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_users, self.n_valid_users, self.n_test_users, self.seqs_per_user, self.K, self.max_attempts) < 1:
            raise ValueError(f"counts must be positive: {self}")
        if self.T <= 0.0 or self.mean_rate <= 0.0 or self.sparsity <= 0.0 or self.rate_spread < 0.0:
            raise ValueError(f"T, mean_rate and sparsity must be positive: {self}")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError(f"heterogeneity must lie in [0, 1], got {self.heterogeneity}")

    @property
    def length_filter(self) -> LengthFilter:
        return LengthFilter(self.min_events, self.max_events)

    @property
    def excitation(self) -> Excitation | None:
        if self.excitation_alpha == 0.0:
            return None
        return Excitation(self.excitation_alpha, self.excitation_omega)


@dataclass(frozen=True)
class Population:
    train: Dataset
    valid: Dataset
    test: Dataset
    profiles: dict[str, SynthUserProfile]
    oracle: dict[str, float]
    """seq_id -> exact log-likelihood under the generating process."""

    config: SynthConfig

    def splits(self) -> dict[str, Dataset]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def draw_profile(user_id: str, cfg: SynthConfig, rng: np.random.Generator) -> SynthUserProfile:
    h = cfg.heterogeneity
    signature = rng.dirichlet(np.full(cfg.K, cfg.sparsity))
    probs = (1.0 - h) * np.full(cfg.K, 1.0 / cfg.K) + h * signature
    sigma = cfg.rate_spread * h
    rate = cfg.mean_rate * math.exp(sigma * rng.standard_normal() - 0.5 * sigma * sigma)
    return SynthUserProfile(user_id, rate, probs / probs.sum(), cfg.excitation)


def simulate(profile: SynthUserProfile, T: float, rng: np.random.Generator) -> list[Event]:
    """Exact draw on [0, T): exponential gaps, or Ogata thinning when excited."""
    times: list[float] = []
    exc = profile.excitation
    if exc is None or exc.alpha == 0.0:
        t = rng.exponential(1.0 / profile.base_rate)
        while t < T:
            times.append(t)
            t += rng.exponential(1.0 / profile.base_rate)
    else:
        t, excess = 0.0, 0.0
        while True:
            # The intensity only decays until the next event, so its current value bounds it.
            bound = profile.base_rate + excess
            gap = rng.exponential(1.0 / bound)
            t += gap
            if t >= T:
                break
            excess *= math.exp(-exc.omega * gap)
            if rng.uniform() * bound < profile.base_rate + excess:
                times.append(t)
                excess += exc.alpha
    marks = rng.choice(profile.mark_probs.size, size=len(times), p=profile.mark_probs)
    return [Event(float(t), int(k)) for t, k in zip(times, marks)]


def oracle_loglik(profile: SynthUserProfile, seq: Sequence) -> float:
    """Exact log-likelihood of seq under the profile's process."""
    times = seq.times
    probs = profile.mark_probs
    if np.any(seq.marks >= probs.size):
        raise ValueError(f"{seq.seq_id}: marks exceed the profile's K={probs.size}")
    mark_term = float(np.sum(np.log(probs[seq.marks]))) if len(seq) else 0.0
    mu, T = profile.base_rate, seq.horizon
    exc = profile.excitation
    if exc is None or exc.alpha == 0.0:
        return len(seq) * math.log(mu) + mark_term - mu * T
    log_rates = 0.0
    carry = 0.0
    for i in range(len(times)):
        if i:
            carry = math.exp(-exc.omega * (times[i] - times[i - 1])) * (1.0 + carry)
        log_rates += math.log(mu + exc.alpha * carry)
    compensator = mu * T + (exc.alpha / exc.omega) * float(np.sum(-np.expm1(-exc.omega * (T - times))))
    return log_rates + mark_term - compensator


def _user_sequences(profile: SynthUserProfile, cfg: SynthConfig, rng: np.random.Generator) -> list[Sequence]:
    out = []
    for j in range(cfg.seqs_per_user):
        seq_id = f"{profile.user_id}-s{j}"
        for _ in range(cfg.max_attempts):
            seq = Sequence(tuple(simulate(profile, cfg.T, rng)), cfg.T, profile.user_id, seq_id)
            if cfg.length_filter.accepts(seq):
                out.append(seq)
                break
        else:
            logger.warning("%s: no draw within [%d, %d] events after %d attempts", seq_id, cfg.min_events, cfg.max_events, cfg.max_attempts)
    return out


def generate_population(cfg: SynthConfig | None = None, **overrides: Any) -> Population:
    """Train/valid/test datasets over disjoint users plus ground truth."""
    cfg = replace(cfg or SynthConfig(), **overrides)
    counts: dict[Split, int] = {"train": cfg.n_users, "valid": cfg.n_valid_users, "test": cfg.n_test_users}
    profiles: dict[str, SynthUserProfile] = {}
    oracle: dict[str, float] = {}
    datasets: dict[str, Dataset] = {}
    for s_idx, (split, n) in enumerate(counts.items()):
        users = []
        for u in range(n):
            rng = substream(cfg.seed, "synth-user", s_idx, u)
            profile = draw_profile(f"{split}-u{u:04d}", cfg, rng)
            seqs = _user_sequences(profile, cfg, rng)
            if not seqs:
                continue
            profiles[profile.user_id] = profile
            for seq in seqs:
                oracle[seq.seq_id] = oracle_loglik(profile, seq)
            users.append(UserRecord(profile.user_id, tuple(seqs)))
        datasets[split] = Dataset(tuple(users), cfg.K, split)
        logger.info("generated %s: %d users, %d sequences", split, len(users), datasets[split].n_sequences)
    return Population(datasets["train"], datasets["valid"], datasets["test"], profiles, oracle, cfg)


def save_population(pop: Population, out_dir: str | Path) -> dict[str, Any]:
    """Write the three splits, their sidecars and ground_truth.json; returns per-split stats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for name, ds in pop.splits().items():
        save_dataset(ds, out / f"{name}.jsonl")
        stats[name] = asdict(dataset_stats(ds))
    truth = {
        "config": asdict(pop.config),
        "profiles": {uid: p.to_dict() for uid, p in sorted(pop.profiles.items())},
        "oracle_loglik": dict(sorted(pop.oracle.items())),
    }
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return stats


def load_ground_truth(path: str | Path) -> tuple[dict[str, SynthUserProfile], dict[str, float]]:
    raw = json.loads(Path(path).read_text())
    profiles = {
        uid: SynthUserProfile(
            uid,
            p["base_rate"],
            np.asarray(p["mark_probs"]),
            None if p["excitation"] is None else Excitation(**p["excitation"]),
        )
        for uid, p in raw["profiles"].items()
    }
    return profiles, {k: float(v) for k, v in raw["oracle_loglik"].items()}

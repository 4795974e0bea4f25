"""Event-core domain types and their JSON Lines form.

A dataset file holds one sequence per line:

    {"user": "u1", "seq_id": "s1", "T": 1.0, "events": [[0.2, 3], [0.5, 1]]}

next to a sidecar `<stem>.manifest.json` giving K, the split name and counts.
Times are dataset units relative to the sequence start, strictly increasing
and at most T; marks are 0-indexed integers below K.

All types are frozen and safe to share across threads.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

Split = Literal["train", "valid", "test"]
SPLITS: tuple[Split, ...] = ("train", "valid", "test")


@dataclass(frozen=True, slots=True)
class Event:
    """One (time, mark) observation."""

    time: float
    """Nonnegative time in dataset units."""

    mark: int
    """Mark index in [0, K)."""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.time) and self.time >= 0.0):
            raise DataError(f"event time must be finite and >= 0, got {self.time}")
        if self.mark < 0:
            raise DataError(f"mark must be >= 0, got {self.mark}")


@dataclass(frozen=True)
class Sequence:
    """A time-ordered event list observed over [0, horizon]."""

    events: tuple[Event, ...]
    horizon: float
    user_id: str
    seq_id: str

    def __post_init__(self) -> None:
        if not (math.isfinite(self.horizon) and self.horizon > 0.0):
            raise DataError(f"{self.seq_id}: horizon must be positive, got {self.horizon}")
        prev = -math.inf
        for ev in self.events:
            if ev.time <= prev:
                raise DataError(f"{self.seq_id}: non-increasing times ({prev} then {ev.time})")
            prev = ev.time
        if self.events and self.events[-1].time > self.horizon:
            raise DataError(
                f"{self.seq_id}: event at {self.events[-1].time} beyond horizon {self.horizon}"
            )

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([ev.time for ev in self.events], dtype=np.float64)

    @property
    def marks(self) -> np.ndarray:
        return np.array([ev.mark for ev in self.events], dtype=np.int64)

    def with_events(self, events: Iterable[Event], horizon: float | None = None) -> Sequence:
        return Sequence(
            tuple(events),
            self.horizon if horizon is None else horizon,
            self.user_id,
            self.seq_id,
        )


@dataclass(frozen=True)
class UserRecord:
    """A user and its reference set R^u."""

    user_id: str
    reference_sequences: tuple[Sequence, ...] = ()

    def __post_init__(self) -> None:
        for seq in self.reference_sequences:
            if seq.user_id != self.user_id:
                raise DataError(
                    f"sequence {seq.seq_id} belongs to {seq.user_id}, not {self.user_id}"
                )


@dataclass(frozen=True)
class Dataset:
    """Users of one split over a mark vocabulary of size K."""

    users: tuple[UserRecord, ...]
    K: int
    split: Split = "train"

    def __post_init__(self) -> None:
        if self.K < 1:
            raise DataError(f"K must be positive, got {self.K}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        seen: set[str] = set()
        for user in self.users:
            if user.user_id in seen:
                raise DataError(f"duplicate user {user.user_id!r} in split {self.split}")
            seen.add(user.user_id)
            for seq in user.reference_sequences:
                for ev in seq.events:
                    if ev.mark >= self.K:
                        raise DataError(f"{seq.seq_id}: mark {ev.mark} >= K={self.K}")

    @property
    def user_ids(self) -> frozenset[str]:
        return frozenset(u.user_id for u in self.users)

    def sequences(self) -> Iterator[Sequence]:
        for user in self.users:
            yield from user.reference_sequences

    @property
    def n_sequences(self) -> int:
        return sum(len(u.reference_sequences) for u in self.users)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences())

    def user(self, user_id: str) -> UserRecord:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def subset(self, user_ids: Iterable[str]) -> Dataset:
        keep = set(user_ids)
        return Dataset(tuple(u for u in self.users if u.user_id in keep), self.K, self.split)


@dataclass(frozen=True)
class LengthFilter:
    """Sequence-length bounds applied when preparing or loading data."""

    min_events: int = 5
    """Sequences with fewer events are dropped."""

    max_events: int = 200
    """Sequences with more events are dropped."""

    def accepts(self, seq: Sequence) -> bool:
        return self.min_events <= len(seq) <= self.max_events


@dataclass(frozen=True)
class DatasetStats:
    """Summary row describing one split."""

    split: str
    K: int
    mean_horizon: float
    mean_length: float
    mean_refs_per_user: float
    n_sequences: int
    n_users: int
    extra: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def sequence_to_record(seq: Sequence, **extra: Any) -> dict[str, Any]:
    record: dict[str, Any] = {
        "user": seq.user_id,
        "seq_id": seq.seq_id,
        "T": seq.horizon,
        "events": [[ev.time, ev.mark] for ev in seq.events],
    }
    record.update(extra)
    return record


def _parse_record(raw: dict[str, Any], path: str, lineno: int) -> Sequence:
    try:
        events = tuple(Event(float(t), int(k)) for t, k in raw["events"])
        return Sequence(events, float(raw["T"]), str(raw["user"]), str(raw["seq_id"]))
    except DataError as exc:
        raise DataError(str(exc), path=path, line=lineno) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed record: {exc!r}", path=path, line=lineno) from exc


def manifest_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.manifest.json")


def _jitter(raw: dict[str, Any], epsilon: float, rng: np.random.Generator) -> dict[str, Any]:
    """Shift every raw time by uniform noise in [0, epsilon), re-sorted.

    A shift that would pass T is applied downward instead, so ties at T
    are broken too.
    """
    try:
        horizon = float(raw["T"])
        pairs = [(float(t), int(k)) for t, k in raw["events"]]
    except (KeyError, TypeError, ValueError):
        return raw
    noise = rng.uniform(0.0, epsilon, size=len(pairs))
    shifted = [(t + d if t + d <= horizon else max(t - d, 0.0), k) for (t, k), d in zip(pairs, noise, strict=True)]
    jittered = sorted(shifted)
    return {**raw, "events": [[t, k] for t, k in jittered]}


def load_dataset(
    path: str | Path,
    K: int | None = None,
    *,
    split: Split | None = None,
    min_events: int = 2,
    max_events: int = 200,
    jitter: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Read a JSONL dataset and verify every event-core invariant.

    K and the split name default to the sidecar manifest. Sequences outside
    [min_events, max_events] are dropped with a warning. A positive `jitter`
    adds uniform noise in [0, jitter) to every time before validation, which
    breaks ties in coarse timestamps.
    """
    path = Path(path)
    sidecar = manifest_path(path)
    meta: dict[str, Any] = {}
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    if K is None:
        if "K" not in meta:
            raise DataError("K not given and no manifest sidecar found", path=str(path))
        K = int(meta["K"])
    split_name: Split = split or meta.get("split", "train")
    rng = np.random.default_rng(seed)

    by_user: dict[str, list[Sequence]] = {}
    dropped = 0
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}", path=str(path)) from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"parse error: {exc.msg}", path=str(path), line=lineno) from exc
        if jitter > 0.0:
            raw = _jitter(raw, jitter, rng)
        seq = _parse_record(raw, str(path), lineno)
        for ev in seq.events:
            if ev.mark >= K:
                raise DataError(f"mark {ev.mark} >= K={K}", path=str(path), line=lineno)
        if not min_events <= len(seq) <= max_events:
            dropped += 1
            continue
        by_user.setdefault(seq.user_id, []).append(seq)
    if dropped:
        logger.warning("%s: dropped %d sequences outside [%d, %d] events", path, dropped, min_events, max_events)

    users = tuple(UserRecord(uid, tuple(seqs)) for uid, seqs in by_user.items())
    dataset = Dataset(users, K, split_name)
    logger.info(
        "loaded %s: %d users, %d sequences, %d events", path, len(users), dataset.n_sequences, dataset.n_events
    )
    return dataset


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write canonical JSONL plus the sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for seq in dataset.sequences():
            fh.write(json.dumps(sequence_to_record(seq)) + "\n")
    meta = {
        "K": dataset.K,
        "split": dataset.split,
        "n_users": len(dataset.users),
        "n_sequences": dataset.n_sequences,
        "n_events": dataset.n_events,
    }
    manifest_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def save_sequences(sequences: Iterable[Sequence], path: str | Path, **provenance: Any) -> None:
    """Write sequences as JSONL, each line carrying a `provenance` object."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for seq in sequences:
            extra = {"provenance": provenance} if provenance else {}
            fh.write(json.dumps(sequence_to_record(seq, **extra)) + "\n")


def check_disjoint(*datasets: Dataset) -> None:
    """Raise DataError if any two datasets share a user id."""
    for i, a in enumerate(datasets):
        for b in datasets[i + 1 :]:
            shared = a.user_ids & b.user_ids
            if shared:
                raise DataError(
                    f"splits {a.split} and {b.split} share users: {sorted(shared)[:5]}"
                )


def load_splits(directory: str | Path, K: int | None = None, **kwargs: Any) -> dict[str, Dataset]:
    """Load train/valid/test JSONL files from a directory, enforcing disjoint users."""
    directory = Path(directory)
    found: dict[str, Dataset] = {}
    for name in SPLITS:
        candidate = directory / f"{name}.jsonl"
        if candidate.exists():
            found[name] = load_dataset(candidate, K, split=name, **kwargs)
    if not found:
        raise DataError("no train/valid/test .jsonl files", path=str(directory))
    check_disjoint(*found.values())
    return found


# ---------------------------------------------------------------------------
# Prefix operations
# ---------------------------------------------------------------------------


def split_prefix(seq: Sequence, n_events: int) -> tuple[Sequence, Sequence]:
    """(first n_events, remainder); both keep the horizon and ids."""
    if not 0 <= n_events <= len(seq):
        raise ValueError(f"n_events={n_events} outside [0, {len(seq)}]")
    return seq.with_events(seq.events[:n_events]), seq.with_events(seq.events[n_events:])


def split_fraction(seq: Sequence, rho: float) -> tuple[Sequence, Sequence, float]:
    """Prefix of ceil(rho * |seq|) events, the remainder, and the prefix end time."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0, 1]")
    # Round before ceil so 0.3 * 10 does not become 4.
    n = min(len(seq), math.ceil(round(rho * len(seq), 9)))
    prefix, rest = split_prefix(seq, n)
    pi = prefix.events[-1].time if prefix.events else 0.0
    return prefix, rest, pi


# ---------------------------------------------------------------------------
# Preparation helpers
# ---------------------------------------------------------------------------


def window_stream(
    user_id: str,
    events: Iterable[Event],
    window: float,
    length_filter: LengthFilter | None = None,
    start: float = 0.0,
) -> list[Sequence]:
    """Cut one absolute-time stream into fixed windows with relative times.

    The length filter runs after windowing, so a long stream yields only the
    windows that individually pass it.
    """
    if window <= 0.0:
        raise ValueError("window must be positive")
    length_filter = length_filter or LengthFilter()
    buckets: dict[int, list[Event]] = {}
    for ev in events:
        if ev.time < start:
            continue
        idx = int((ev.time - start) // window)
        buckets.setdefault(idx, []).append(Event(ev.time - start - idx * window, ev.mark))
    out = []
    for idx in sorted(buckets):
        seq = Sequence(tuple(buckets[idx]), window, user_id, f"{user_id}-w{idx}")
        if length_filter.accepts(seq):
            out.append(seq)
    return out


def dataset_stats(dataset: Dataset) -> DatasetStats:
    seqs = list(dataset.sequences())
    n_users = len(dataset.users)
    return DatasetStats(
        split=dataset.split,
        K=dataset.K,
        mean_horizon=float(np.mean([s.horizon for s in seqs])) if seqs else 0.0,
        mean_length=float(np.mean([len(s) for s in seqs])) if seqs else 0.0,
        mean_refs_per_user=len(seqs) / n_users if n_users else 0.0,
        n_sequences=len(seqs),
        n_users=n_users,
        extra={"mark_counts": dict(sorted(Counter(int(k) for s in seqs for k in s.marks).items()))},
    )


def max_gap(dataset: Dataset) -> float:
    """Largest gap between consecutive events (from 0 for the first event)."""
    best = 0.0
    for seq in dataset.sequences():
        prev = 0.0
        for ev in seq.events:
            best = max(best, ev.time - prev)
            prev = ev.time
    return best


def mean_gap(dataset: Dataset) -> float:
    gaps = []
    for seq in dataset.sequences():
        times = np.concatenate([[0.0], seq.times])
        gaps.extend(np.diff(times).tolist())
    return float(np.mean(gaps)) if gaps else 1.0

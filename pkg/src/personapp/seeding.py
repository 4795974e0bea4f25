"""Seed resolution and keyed random substreams."""

from __future__ import annotations

import os
import zlib

import numpy as np

from .errors import UsageError

SEED_ENV = "MTPP_SEED"


def resolve_seed(flag: int | None) -> int:
    """--seed flag, then $MTPP_SEED, then 0."""
    if flag is not None:
        return flag
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def substream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Independent generator keyed by (seed, purpose, index...)."""
    key = [seed, zlib.crc32(purpose.encode()), *index]
    return np.random.default_rng(np.random.SeedSequence(key))

"""Mark and time embeddings shared by the encoder and the decoders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .diffgraph import Node, ParameterStore


class MarkEmbedding:
    """Learnable K x d_mark table; row k embeds mark k."""

    def __init__(self, store: ParameterStore, num_marks: int, d_mark: int, name: str = "marks.table") -> None:
        self.num_marks = num_marks
        self.d_mark = d_mark
        self.table = store.matrix(name, num_marks, d_mark)

    def __call__(self, k: int) -> Node:
        return embed_mark(self, k)


def embed_mark(embedding: MarkEmbedding, k: int) -> Node:
    """Row k of the table as a (d_mark, 1) column."""
    if not 0 <= k < embedding.num_marks:
        raise ValueError(f"mark {k} outside [0, {embedding.num_marks})")
    return dg.row(embedding.table.node(), k)


@dataclass(frozen=True)
class TemporalEmbeddingSpec:
    """Fixed sinusoidal embedding of elapsed time.

    alpha_j = exp(-j * log(T_max) / d_time) for j = 0 .. d_time/2 - 1, with
    T_max floored at 1 so the frequencies never increase with j.
    """

    d_time: int
    t_max: float
    alpha: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.d_time <= 0 or self.d_time % 2:
            raise ValueError(f"d_time must be a positive even integer, got {self.d_time}")
        if self.t_max <= 0.0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        j = np.arange(self.d_time // 2, dtype=np.float64)
        object.__setattr__(self, "alpha", np.exp(-j * math.log(max(self.t_max, 1.0)) / self.d_time))


def embed_time(t: float, t_prev: float, spec: TemporalEmbeddingSpec) -> Node:
    """[sin(alpha * dt); cos(alpha * dt)] with dt = t - t_prev, as a constant node."""
    if t < t_prev:
        raise ValueError(f"cannot embed t={t} before t_prev={t_prev}")
    phase = spec.alpha * (t - t_prev)
    return dg.constant(np.concatenate([np.sin(phase), np.cos(phase)]).reshape(-1, 1))

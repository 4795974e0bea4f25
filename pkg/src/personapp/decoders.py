"""Neural MTPP decoders: RMTPP and the neural Hawkes process.

Both implement the `Decoder` protocol: a recurrent state updated at each
event from the input [mark embedding; z], and a vector of K mark-specific
intensities queryable at any time after the last conditioned event.

- RMTPP: h_i = GRU(h_{i-1}, [k_i; z]),
  lambda(t) = exp(W h_i + w * (t - t_i) + b) with a per-mark decay w.
- NHP: continuous-time LSTM state (see `layers`),
  lambda(t) = softplus(W h(t)) with h(t) interpolated between events.

With latent_size == 0 the z pathway is removed altogether: the input is the
mark embedding alone and h_0 is a learned vector (the decoder-only model).

ConstantDecoder holds fixed mark rates regardless of history; it is the
homogeneous Poisson reduction used as an exact reference.
"""

from __future__ import annotations

import logging
import threading
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Literal, Protocol, runtime_checkable

import numpy as np

from . import diffgraph as dg
from .diffgraph import Node, ParameterStore
from .embeddings import MarkEmbedding, embed_mark
from .errors import NumericError, ShapeError
from .events import Event
from .layers import CTLSTMCell, GRUCell, Linear, decay_cell, interpolate_hidden

logger = logging.getLogger(__name__)

ModelKind = Literal["rmtpp", "nhp"]

EXPONENT_CEILING = 30.0


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder sizes."""

    model: ModelKind = "rmtpp"
    hidden_size: int = 64
    d_mark: int = 32
    latent_size: int = 32
    """0 selects the decoder-only variant."""
    K: int = 1

    def __post_init__(self) -> None:
        if self.model not in ("rmtpp", "nhp"):
            raise ValueError(f"unknown decoder model {self.model!r}")
        if min(self.hidden_size, self.d_mark, self.K) < 1 or self.latent_size < 0:
            raise ValueError(f"decoder sizes must be positive: {self}")


@dataclass(frozen=True)
class DecoderState:
    """Everything needed to evaluate the intensity until the next event."""

    h: Node
    t_last: float
    n_events: int = 0
    cell: Node | None = None
    cell_target: Node | None = None
    decay: Node | None = None
    gate_out: Node | None = None


@dataclass(frozen=True)
class IntensityVector:
    """Mark-specific rates at one time (events per time unit)."""

    rates: np.ndarray

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    @property
    def mark_distribution(self) -> np.ndarray:
        return self.rates / self.rates.sum()


class ClampCounter:
    """Counts exponent entries clamped during intensity queries."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.count = 0

    def __call__(self, n: int) -> None:
        with self._lock:
            self.count += n
        logger.debug("clamped %d intensity exponents", n)


@runtime_checkable
class Decoder(Protocol):
    """Shared decoder interface."""

    config: DecoderConfig
    clamps: ClampCounter

    def init_state(self, z: Node | None) -> DecoderState: ...

    def update_state(self, state: DecoderState, event: Event, z: Node | None) -> DecoderState: ...

    def rates(self, state: DecoderState, times: np.ndarray) -> Node: ...


class _DecoderBase:
    """Validated event updates and intensity queries."""

    config: DecoderConfig
    clamps: ClampCounter

    def _check_event(self, state: DecoderState, event: Event) -> float:
        dt = event.time - state.t_last
        # The start anchor t=0 may coincide with a first event at t=0.
        if dt < 0.0 or (dt == 0.0 and state.n_events > 0):
            raise ValueError(f"event at {event.time} does not follow t_last={state.t_last}")
        return dt

    def _elapsed(self, state: DecoderState, times: np.ndarray) -> np.ndarray:
        dt = np.asarray(times, dtype=np.float64).reshape(-1) - state.t_last
        if dt.size and dt.min() < 0.0:
            raise ValueError(f"intensity queried before t_last={state.t_last}")
        return dt

    def _checked(self, out: Node) -> Node:
        if not np.all(np.isfinite(out.value)):
            raise NumericError("non-finite intensity", {"clamps": self.clamps.count})
        return out

    def rates(self, state: DecoderState, times: np.ndarray) -> Node:
        raise NotImplementedError

    # Public queries: strictly after the last conditioned event.

    def intensity(self, state: DecoderState, t: float) -> IntensityVector:
        if t <= state.t_last:
            raise ValueError(f"intensity needs t > t_last={state.t_last}, got {t}")
        return IntensityVector(self.rates(state, np.array([t])).value[:, 0].copy())

    def total_intensity(self, state: DecoderState, t: float) -> float:
        return self.intensity(state, t).total

    def mark_distribution(self, state: DecoderState, t: float) -> np.ndarray:
        return self.intensity(state, t).mark_distribution


class ConstantDecoder(_DecoderBase):
    """Frozen decoder with fixed mark rates; history and z are ignored."""

    def __init__(self, rates: Iterable[float]) -> None:
        self.fixed_rates = np.asarray(list(rates), dtype=np.float64)
        if self.fixed_rates.size == 0 or np.any(self.fixed_rates <= 0.0):
            raise ValueError(f"constant rates must be positive, got {self.fixed_rates}")
        self.config = DecoderConfig(K=self.fixed_rates.size, latent_size=0)
        self.clamps = ClampCounter()

    def init_state(self, z: Node | None) -> DecoderState:
        return DecoderState(h=dg.constant(0.0), t_last=0.0)

    def update_state(self, state: DecoderState, event: Event, z: Node | None) -> DecoderState:
        self._check_event(state, event)
        if not 0 <= event.mark < self.config.K:
            raise ValueError(f"mark {event.mark} outside [0, {self.config.K})")
        return DecoderState(h=state.h, t_last=event.time, n_events=state.n_events + 1)

    def rates(self, state: DecoderState, times: np.ndarray) -> Node:
        n = self._elapsed(state, times).size
        return dg.constant(np.tile(self.fixed_rates.reshape(-1, 1), (1, n)))


class _RecurrentDecoder(_DecoderBase):
    """Shared plumbing: h_0 and the [mark; z] input."""

    def __init__(self, store: ParameterStore, config: DecoderConfig, marks: MarkEmbedding, prefix: str) -> None:
        if marks.d_mark != config.d_mark or marks.num_marks != config.K:
            raise ShapeError("decoder.marks", (marks.num_marks, marks.d_mark), (config.K, config.d_mark))
        self.config = config
        self.marks = marks
        self.prefix = prefix
        self.clamps = ClampCounter()
        self.input_size = config.d_mark + config.latent_size
        if config.latent_size > 0:
            self.init = Linear(store, f"{prefix}.init", config.latent_size, config.hidden_size)
        else:
            self.h0 = store.bias(f"{prefix}.h0", config.hidden_size)

    @property
    def personalized(self) -> bool:
        return self.config.latent_size > 0

    def _initial_preactivation(self, z: Node | None) -> Node:
        """W_0 z + b_0, or the learned h_0 of the decoder-only variant."""
        if not self.personalized:
            return self.h0.node()
        if z is None or z.shape != (self.config.latent_size, 1):
            got = (0, 0) if z is None else z.shape
            raise ShapeError("init_state", got, (self.config.latent_size, 1))
        return self.init(z)

    def _initial_hidden(self, z: Node | None) -> Node:
        pre = self._initial_preactivation(z)
        return dg.tanh(pre) if self.personalized else pre

    def _input(self, mark: int, z: Node | None) -> Node:
        k = embed_mark(self.marks, mark)
        if not self.personalized:
            return k
        if z is None:
            raise ShapeError("update_state", (0, 0), (self.config.latent_size, 1))
        return dg.concat([k, z])


class RMTPPDecoder(_RecurrentDecoder):
    """Piecewise exponentially decaying intensity over a GRU state."""

    def __init__(self, store: ParameterStore, config: DecoderConfig, marks: MarkEmbedding, prefix: str = "decoder") -> None:
        super().__init__(store, config, marks, prefix)
        self.gru = GRUCell(store, f"{prefix}.gru", self.input_size, config.hidden_size)
        self.W = store.matrix(f"{prefix}.intensity.W", config.K, config.hidden_size)
        self.w = store.bias(f"{prefix}.intensity.w", config.K)
        self.b = store.bias(f"{prefix}.intensity.b", config.K)

    def init_state(self, z: Node | None) -> DecoderState:
        return DecoderState(h=self._initial_hidden(z), t_last=0.0)

    def update_state(self, state: DecoderState, event: Event, z: Node | None) -> DecoderState:
        self._check_event(state, event)
        h = self.gru(self._input(event.mark, z), state.h)
        return DecoderState(h=h, t_last=event.time, n_events=state.n_events + 1)

    def log_rate_base(self, state: DecoderState) -> Node:
        """W h_i + b, the log-rate at the last event."""
        return dg.matmul(self.W.node(), state.h) + self.b.node()

    def rates(self, state: DecoderState, times: np.ndarray) -> Node:
        dt = self._elapsed(state, times)
        base = self.log_rate_base(state)
        exponent = dg.tile_cols(base, dt.size) + dg.matmul(self.w.node(), dg.constant(dt.reshape(1, -1)))
        return self._checked(dg.exp(dg.clamp_max(exponent, EXPONENT_CEILING, self.clamps)))


class NHPDecoder(_RecurrentDecoder):
    """softplus intensity over a continuous-time LSTM."""

    def __init__(self, store: ParameterStore, config: DecoderConfig, marks: MarkEmbedding, prefix: str = "decoder") -> None:
        super().__init__(store, config, marks, prefix)
        H = config.hidden_size
        self.cell = CTLSTMCell(store, f"{prefix}.ctlstm", self.input_size, H)
        self.init_decay = store.bias(f"{prefix}.init_decay", H)
        self.W = store.matrix(f"{prefix}.intensity.W", config.K, H)

    def init_state(self, z: Node | None) -> DecoderState:
        # c = c_bar = W_0 z + b_0 with o = 1, so h(t) = h_0 until the first event.
        pre = self._initial_preactivation(z)
        return DecoderState(
            h=dg.tanh(pre),
            t_last=0.0,
            cell=pre,
            cell_target=pre,
            decay=dg.softplus(self.init_decay.node()),
            gate_out=dg.constant(np.ones((self.config.hidden_size, 1))),
        )

    def _parts(self, state: DecoderState) -> tuple[Node, Node, Node, Node]:
        if state.cell is None or state.cell_target is None or state.decay is None or state.gate_out is None:
            raise ValueError("NHP state lacks continuous-time cell fields")
        return state.cell, state.cell_target, state.decay, state.gate_out

    def update_state(self, state: DecoderState, event: Event, z: Node | None) -> DecoderState:
        dt = np.array([self._check_event(state, event)])
        cell, target, decay, gate_out = self._parts(state)
        c_t = decay_cell(cell, target, decay, dt)
        h_in = gate_out * dg.tanh(c_t)
        out = self.cell(self._input(event.mark, z), h_in, c_t, target)
        return DecoderState(
            h=out.gate_out * dg.tanh(out.cell),
            t_last=event.time,
            n_events=state.n_events + 1,
            cell=out.cell,
            cell_target=out.cell_target,
            decay=out.decay,
            gate_out=out.gate_out,
        )

    def hidden_at(self, state: DecoderState, times: np.ndarray) -> Node:
        """Interpolated h(t), one column per query time."""
        cell, target, decay, gate_out = self._parts(state)
        return interpolate_hidden(cell, target, decay, gate_out, self._elapsed(state, times))

    def rates(self, state: DecoderState, times: np.ndarray) -> Node:
        return self._checked(dg.softplus(dg.matmul(self.W.node(), self.hidden_at(state, times))))


def build_decoder(store: ParameterStore, config: DecoderConfig, marks: MarkEmbedding, prefix: str = "decoder") -> RMTPPDecoder | NHPDecoder:
    if config.model == "rmtpp":
        return RMTPPDecoder(store, config, marks, prefix)
    return NHPDecoder(store, config, marks, prefix)


def roll_states(decoder: Decoder, z: Node | None, events: Iterable[Event]) -> list[DecoderState]:
    """States [s_0, s_1, ..., s_n]; s_i has conditioned on the first i events."""
    states = [decoder.init_state(z)]
    for ev in events:
        states.append(decoder.update_state(states[-1], ev, z))
    return states


def rmtpp_compensator(decoder: RMTPPDecoder, state: DecoderState, a: float, b: float) -> float:
    """Exact integral of the total RMTPP intensity over [a, b] within one segment."""
    if a < state.t_last or b < a:
        raise ValueError(f"interval [{a}, {b}] outside the segment starting at {state.t_last}")
    c = decoder.log_rate_base(state).value[:, 0]
    w = decoder.w.value[:, 0]
    start = np.exp(c + w * (a - state.t_last))
    total = 0.0
    for k in range(c.size):
        if w[k] == 0.0:
            total += float(np.exp(c[k]) * (b - a))
        else:
            total += float(start[k] * np.expm1(w[k] * (b - a)) / w[k])
    return total

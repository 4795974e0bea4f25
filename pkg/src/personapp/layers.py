"""Recurrent building blocks on top of diffgraph.

GRUCell follows the usual reset/update formulation:

    r  = sigmoid(W_r x + U_r h + b_r)
    u  = sigmoid(W_z x + U_z h + b_z)
    n  = tanh(W_n x + U_n (r * h) + b_n)
    h' = (1 - u) * n + u * h

CTLSTMCell is the continuous-time LSTM of the neural Hawkes process. Given
input x and the hidden state h(t_i) read just before the event, seven gates

    i, f, o        = sigmoid(.)      input, forget, output
    z              = tanh(.)         candidate
    i_bar, f_bar   = sigmoid(.)      target input, target forget
    delta          = softplus(.)     decay rate

produce c = f * c(t_i) + i * z and c_bar = f_bar * c_bar_prev + i_bar * z.
Between events the cell relaxes toward its target,

    c(t) = c_bar + (c - c_bar) * exp(-delta * (t - t_i)),   h(t) = o * tanh(c(t)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import Node, ParameterStore
from .errors import ShapeError


class Linear:
    """y = W x + b."""

    def __init__(self, store: ParameterStore, name: str, in_size: int, out_size: int) -> None:
        self.weight = store.matrix(f"{name}.W", out_size, in_size)
        self.bias = store.bias(f"{name}.b", out_size)

    def __call__(self, x: Node) -> Node:
        return dg.matmul(self.weight.node(), x) + self.bias.node()


class GRUCell:
    def __init__(self, store: ParameterStore, name: str, input_size: int, hidden_size: int) -> None:
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.W = {g: store.matrix(f"{name}.W_{g}", hidden_size, input_size) for g in "rzn"}
        self.U = {g: store.matrix(f"{name}.U_{g}", hidden_size, hidden_size) for g in "rzn"}
        self.b = {g: store.bias(f"{name}.b_{g}", hidden_size) for g in "rzn"}

    def _pre(self, gate: str, x: Node, h: Node) -> Node:
        return dg.matmul(self.W[gate].node(), x) + dg.matmul(self.U[gate].node(), h) + self.b[gate].node()

    def __call__(self, x: Node, h: Node) -> Node:
        if x.shape != (self.input_size, 1) or h.shape != (self.hidden_size, 1):
            raise ShapeError("gru", x.shape, h.shape)
        r = dg.sigmoid(self._pre("r", x, h))
        u = dg.sigmoid(self._pre("z", x, h))
        n = dg.tanh(self._pre("n", x, r * h))
        return (1.0 - u) * n + u * h


@dataclass(frozen=True)
class CTLSTMOutput:
    cell: Node
    cell_target: Node
    decay: Node
    gate_out: Node


class CTLSTMCell:
    """Stacked-gate continuous-time LSTM; gate rows ordered i, f, o, z, i_bar, f_bar, delta."""

    GATES = 7

    def __init__(self, store: ParameterStore, name: str, input_size: int, hidden_size: int) -> None:
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight = store.matrix(f"{name}.W", self.GATES * hidden_size, input_size + hidden_size)
        self.bias = store.bias(f"{name}.b", self.GATES * hidden_size)

    def __call__(self, x: Node, h: Node, cell: Node, cell_target: Node) -> CTLSTMOutput:
        H = self.hidden_size
        pre = dg.matmul(self.weight.node(), dg.concat([x, h])) + self.bias.node()
        gate = [dg.slice_rows(pre, j * H, (j + 1) * H) for j in range(self.GATES)]
        i, f, o = dg.sigmoid(gate[0]), dg.sigmoid(gate[1]), dg.sigmoid(gate[2])
        z = dg.tanh(gate[3])
        i_bar, f_bar = dg.sigmoid(gate[4]), dg.sigmoid(gate[5])
        delta = dg.softplus(gate[6])
        return CTLSTMOutput(
            cell=f * cell + i * z,
            cell_target=f_bar * cell_target + i_bar * z,
            decay=delta,
            gate_out=o,
        )


def decay_cell(cell: Node, cell_target: Node, decay: Node, dt: np.ndarray) -> Node:
    """c(t) for a row of elapsed times dt >= 0; returns (hidden, len(dt))."""
    dt_row = dg.constant(np.asarray(dt, dtype=np.float64).reshape(1, -1))
    n = dt_row.shape[1]
    factor = dg.exp(-dg.matmul(decay, dt_row))
    return dg.tile_cols(cell_target, n) + dg.tile_cols(cell - cell_target, n) * factor


def interpolate_hidden(cell: Node, cell_target: Node, decay: Node, gate_out: Node, dt: np.ndarray) -> Node:
    """h(t) = o * tanh(c(t)) for each elapsed time in dt."""
    c_t = decay_cell(cell, cell_target, decay, dt)
    return dg.tile_cols(gate_out, c_t.shape[1]) * dg.tanh(c_t)

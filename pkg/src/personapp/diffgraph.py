"""Reverse-mode automatic differentiation over 2-D float64 arrays.

Every value is a (rows, cols) matrix; vectors are columns. Graphs are built
define-by-run: each primitive returns a Node holding its value and, for each
parent, a closure mapping the upstream gradient to that parent's local
contribution. `backward` walks the graph once in reverse topological order.

Trainable values live in `Parameter`s owned by a `ParameterStore`. A tape
never writes to a Parameter directly: `Parameter.node()` mints a fresh leaf
for each use, `gradients()` sums leaf gradients per Parameter and returns
them, and only `backward()` accumulates into `Parameter.grad`. This lets
several worker threads differentiate their own tapes against shared
Parameters and hand the results back for an ordered reduction.

Example:
    >>> store = ParameterStore(seed=0)
    >>> w = store.add("w", np.array([[3.0], [4.0]]))
    >>> x = w.node()
    >>> backward(sum_(x * x))
    >>> w.grad.ravel().tolist()
    [6.0, 8.0]
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterable, Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy.special import expit, logsumexp as _logsumexp

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
GradFn = Callable[[Array], Array]

CHECKPOINT_SCHEMA = 1


def _as_matrix(value: Any) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError("node", tuple(arr.shape))
    return arr


class Node:
    """A value in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "op", "param")

    def __init__(
        self,
        value: Any,
        parents: tuple[tuple[Node, GradFn], ...] = (),
        op: str = "",
        param: Parameter | None = None,
    ) -> None:
        self.value: Array = _as_matrix(value)
        self.grad: Array | None = None
        self.parents = parents
        self.op = op
        self.param = param

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.value.shape
        return rows, cols

    def item(self) -> float:
        """Return the value of a 1x1 node as a float."""
        if self.value.size != 1:
            raise ShapeError("item", self.shape, (1, 1))
        return float(self.value[0, 0])

    def numpy(self) -> Array:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # Operator sugar. Python scalars become scale/shift ops rather than nodes.

    def __add__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other: float) -> Node:
        return add_scalar(self, float(other))

    def __sub__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other: float) -> Node:
        return add_scalar(neg(self), float(other))

    def __mul__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Node:
        return scale(self, float(other))

    def __truediv__(self, other: float) -> Node:
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> Node:
        return neg(self)

    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)


class Parameter:
    """A named trainable matrix."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: Any) -> None:
        self.name = name
        self.value: Array = _as_matrix(value).copy()
        self.grad: Array = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.value.shape
        return rows, cols

    def node(self) -> Node:
        """A fresh leaf reading this parameter's current value."""
        return Node(self.value, op=f"param:{self.name}", param=self)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(value: Any) -> Node:
    """A leaf that never receives gradient."""
    return Node(value, op="const")


def _require_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _require_same("add", a, b)
    return Node(a.value + b.value, ((a, lambda g: g), (b, lambda g: g)), "add")


def sub(a: Node, b: Node) -> Node:
    _require_same("sub", a, b)
    return Node(a.value - b.value, ((a, lambda g: g), (b, lambda g: -g)), "sub")


def mul(a: Node, b: Node) -> Node:
    _require_same("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv, ((a, lambda g: g * bv), (b, lambda g: g * av)), "mul")


def neg(a: Node) -> Node:
    return Node(-a.value, ((a, lambda g: -g),), "neg")


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, ((a, lambda g: g * c),), "scale")


def add_scalar(a: Node, c: float) -> Node:
    return Node(a.value + c, ((a, lambda g: g),), "add_scalar")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return Node(
        av @ bv,
        ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)),
        "matmul",
    )


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    """Stack nodes along rows (axis=0) or columns (axis=1)."""
    if not nodes:
        raise ShapeError("concat", ())
    other = 1 - axis
    if any(n.shape[other] != nodes[0].shape[other] for n in nodes):
        raise ShapeError("concat", *(n.shape for n in nodes))
    value = np.concatenate([n.value for n in nodes], axis=axis)
    parents = []
    start = 0
    for n in nodes:
        stop = start + n.shape[axis]
        if axis == 0:
            parents.append((n, lambda g, s=start, e=stop: g[s:e, :]))
        else:
            parents.append((n, lambda g, s=start, e=stop: g[:, s:e]))
        start = stop
    return Node(value, tuple(parents), "concat")


def slice_rows(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError("slice_rows", a.shape, (start, stop))
    shape = a.value.shape

    def grad(g: Array) -> Array:
        out = np.zeros(shape)
        out[start:stop, :] = g
        return out

    return Node(a.value[start:stop, :], ((a, grad),), "slice_rows")


def row(a: Node, k: int) -> Node:
    """Row k of a matrix, returned as a column vector."""
    if not 0 <= k < a.shape[0]:
        raise ShapeError("row", a.shape, (k,))
    shape = a.value.shape

    def grad(g: Array) -> Array:
        out = np.zeros(shape)
        out[k, :] = g[:, 0]
        return out

    return Node(a.value[k : k + 1, :].T, ((a, grad),), "row")


def pick(a: Node, i: int, j: int) -> Node:
    """The single entry a[i, j] as a 1x1 node."""
    if not (0 <= i < a.shape[0] and 0 <= j < a.shape[1]):
        raise ShapeError("pick", a.shape, (i, j))
    shape = a.value.shape

    def grad(g: Array) -> Array:
        out = np.zeros(shape)
        out[i, j] = g[0, 0]
        return out

    return Node(a.value[i, j], ((a, grad),), "pick")


def tile_cols(a: Node, n: int) -> Node:
    """Repeat a column vector into n identical columns."""
    if a.shape[1] != 1 or n < 1:
        raise ShapeError("tile_cols", a.shape, (n,))
    return Node(
        np.repeat(a.value, n, axis=1),
        ((a, lambda g: g.sum(axis=1, keepdims=True)),),
        "tile_cols",
    )


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def sigmoid(a: Node) -> Node:
    out = expit(a.value)
    return Node(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),), "exp")


def log(a: Node) -> Node:
    av = a.value
    return Node(np.log(av), ((a, lambda g: g / av),), "log")


def softplus(a: Node) -> Node:
    av = a.value
    return Node(np.logaddexp(0.0, av), ((a, lambda g: g * expit(av)),), "softplus")


def clamp_max(a: Node, ceiling: float, on_clamp: Callable[[int], None] | None = None) -> Node:
    """min(a, ceiling) elementwise; clamped entries pass no gradient."""
    mask = a.value <= ceiling
    if on_clamp is not None and not mask.all():
        on_clamp(int((~mask).sum()))
    return Node(np.minimum(a.value, ceiling), ((a, lambda g: g * mask),), "clamp_max")


def sum_(a: Node) -> Node:
    """Sum of all entries as a 1x1 node."""
    shape = a.value.shape
    return Node(a.value.sum(), ((a, lambda g: np.full(shape, g[0, 0])),), "sum")


def sum_rows(a: Node) -> Node:
    """Column sums: (m, n) -> (1, n)."""
    rows = a.shape[0]
    return Node(
        a.value.sum(axis=0, keepdims=True),
        ((a, lambda g: np.repeat(g, rows, axis=0)),),
        "sum_rows",
    )


def mean(a: Node) -> Node:
    return scale(sum_(a), 1.0 / a.value.size)


def logsumexp(a: Node) -> Node:
    """log(sum(exp(a))) over all entries, as a 1x1 node."""
    out = float(_logsumexp(a.value))
    weights = np.exp(a.value - out)
    return Node(out, ((a, lambda g: g[0, 0] * weights),), "logsumexp")


def add_all(nodes: Iterable[Node]) -> Node:
    """Sum a non-empty collection of same-shaped nodes."""
    items = list(nodes)
    if not items:
        raise ShapeError("add_all", ())
    for n in items[1:]:
        _require_same("add_all", items[0], n)
    return Node(
        np.sum([n.value for n in items], axis=0),
        tuple((n, lambda g: g) for n in items),
        "add_all",
    )


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def gradients(
    root: Node, visit: Callable[[Node], None] | None = None
) -> dict[Parameter, Array]:
    """d(root)/d(parameter) for every Parameter reachable from a scalar root.

    Node.grad is filled for every visited node. Parameters are left untouched.
    """
    if root.shape != (1, 1):
        raise ShapeError("backward", root.shape, (1, 1))
    pending: dict[int, Array] = {id(root): np.ones((1, 1))}
    result: dict[Parameter, Array] = {}
    for node in reversed(_topological(root)):
        if visit is not None:
            visit(node)
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node.param is not None:
            acc = result.get(node.param)
            result[node.param] = g.copy() if acc is None else acc + g
        for parent, fn in node.parents:
            contrib = fn(g)
            prev = pending.get(id(parent))
            pending[id(parent)] = contrib if prev is None else prev + contrib
    return result


def backward(root: Node) -> None:
    """Accumulate d(root)/d(parameter) into each reachable Parameter.grad."""
    for param, g in gradients(root).items():
        param.grad += g


# ---------------------------------------------------------------------------
# Parameter store and checkpoints
# ---------------------------------------------------------------------------


class ParameterStore:
    """Ordered, uniquely named collection of Parameters.

    Matrices start uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in
    the column count; biases start at zero.
    """

    def __init__(self, seed: int = 0) -> None:
        self._params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)
        self.seed = seed

    def add(self, name: str, value: Any) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        param = Parameter(name, value)
        self._params[name] = param
        return param

    def matrix(self, name: str, rows: int, cols: int) -> Parameter:
        bound = 1.0 / np.sqrt(cols)
        return self.add(name, self._rng.uniform(-bound, bound, size=(rows, cols)))

    def bias(self, name: str, rows: int, cols: int = 1, fill: float = 0.0) -> Parameter:
        return self.add(name, np.full((rows, cols), fill))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for param in self:
            param.zero_grad()

    def state_dict(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise DataError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, param in self._params.items():
            value = _as_matrix(state[name])
            if value.shape != param.value.shape:
                raise ShapeError(f"load:{name}", param.shape, tuple(value.shape))
            param.value[...] = value

    def save(self, path: str | Path, metadata: dict[str, Any] | None = None) -> None:
        """Write {schema, metadata, parameters: name -> shape + row-major values}."""
        payload = {
            "schema": CHECKPOINT_SCHEMA,
            "metadata": metadata or {},
            "parameters": {
                name: {"shape": list(p.value.shape), "values": p.value.ravel().tolist()}
                for name, p in self._params.items()
            },
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        logger.debug("saved %d parameters to %s", len(self), path)

    def load(self, path: str | Path) -> dict[str, Any]:
        """Restore values saved by `save`; returns the stored metadata."""
        payload = read_checkpoint(path)
        state = {
            name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["parameters"].items()
        }
        self.load_state_dict(state)
        metadata: dict[str, Any] = payload.get("metadata", {})
        return metadata


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        payload: dict[str, Any] = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint: {exc}", path=str(path)) from exc
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise DataError(f"unsupported checkpoint schema {payload.get('schema')!r}", path=str(path))
    return payload


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def numeric_gradient(loss: Callable[[], float], param: Parameter, step: float = 1e-5) -> Array:
    """Central finite differences of `loss` w.r.t. every entry of `param`."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + step
        upper = loss()
        flat[idx] = original - step
        lower = loss()
        flat[idx] = original
        out.reshape(-1)[idx] = (upper - lower) / (2.0 * step)
    return out


def relative_error(analytic: Array, numeric: Array, floor: float = 1e-8) -> float:
    """max |analytic - numeric| / (|numeric| + floor)."""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))

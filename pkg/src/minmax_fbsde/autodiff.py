"""Reverse-mode automatic differentiation on a flat tape of 2-D float64 arrays.

The engine is deliberately small: a fixed set of primitives, each with a
hand-written backward rule, recorded on an append-only tape in evaluation
order. Values are always dense 2-D arrays of 64-bit reals; vectors are
columns, scalars are (1, 1). There is no broadcasting: shapes must conform
exactly, and a bias is broadcast by multiplying with an explicit ones row.

Column-wise batches (one sample per column) fall out of the shape rules for
free, because every primitive either acts element-wise or contracts over
rows only.

The same expression helpers (``matmul``, ``sin``, ``rows``, ...) accept
plain ndarrays and then evaluate eagerly without recording, so model code
written against them runs both taped (training) and tape-free (evaluation).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operands passed to a primitive do not conform."""


class NonFiniteProbe(FloatingPointError):
    """A finite-difference probe produced a non-finite function value."""


def as_matrix(value) -> np.ndarray:
    """Coerce scalars / 1-D vectors / 2-D arrays to a float64 matrix.

    1-D input becomes a column vector; scalars become (1, 1).
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"values must be at most 2-D, got shape {arr.shape}")
    return arr


class Var:
    """Handle to one tape node: (tape, index). Shape is fixed at creation."""

    __slots__ = ("tape", "idx")
    # keep numpy from consuming Var operands so __r*__ methods fire
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(idx={self.idx}, shape={self.shape})"

    # arithmetic sugar; scalars multiply via scalar-multiply, everything else
    # must conform exactly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return smul(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "value", "aux")

    def __init__(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux


# public names of the primitive set, used in diagnostics and the gradient audit
PRIMITIVES = {
    "matmul": "matrix-multiply",
    "add": "add",
    "sub": "subtract",
    "mul": "element-multiply",
    "smul": "scalar-multiply",
    "tanh": "tanh",
    "sigmoid": "sigmoid",
    "sin": "sin",
    "cos": "cos",
    "sum": "sum",
    "sumsq": "sum-of-squares",
    "vstack": "concat-rows",
    "rows": "slice-rows",
}


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{PRIMITIVES[op]}: operand shapes {a.shape} and {b.shape} must match"
        )


def _forward(op: str, vals: tuple[np.ndarray, ...], aux) -> np.ndarray:
    if op == "matmul":
        a, b = vals
        if a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matrix-multiply: inner dimensions {a.shape} @ {b.shape} do not conform"
            )
        return a @ b
    if op == "add":
        _same_shape(op, *vals)
        return vals[0] + vals[1]
    if op == "sub":
        _same_shape(op, *vals)
        return vals[0] - vals[1]
    if op == "mul":
        _same_shape(op, *vals)
        return vals[0] * vals[1]
    if op == "smul":
        return vals[0] * aux
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "sigmoid":
        return expit(vals[0])
    if op == "sin":
        return np.sin(vals[0])
    if op == "cos":
        return np.cos(vals[0])
    if op == "sum":
        return np.sum(vals[0]).reshape(1, 1)
    if op == "sumsq":
        return np.sum(vals[0] * vals[0]).reshape(1, 1)
    if op == "vstack":
        widths = {v.shape[1] for v in vals}
        if len(widths) > 1:
            raise ShapeError(
                f"concat-rows: column counts differ: {[v.shape for v in vals]}"
            )
        return np.vstack(vals)
    if op == "rows":
        lo, hi = aux
        nrows = vals[0].shape[0]
        if not (0 <= lo < hi <= nrows):
            raise ShapeError(
                f"slice-rows: bounds [{lo}, {hi}) invalid for {vals[0].shape}"
            )
        return vals[0][lo:hi]
    raise KeyError(f"unknown primitive {op!r}")


def _acc(grads: list, idx: int, piece: np.ndarray) -> None:
    cur = grads[idx]
    grads[idx] = piece if cur is None else cur + piece


def _backward(node: _Node, g: np.ndarray, grads: list, values) -> None:
    op = node.op
    ins = node.inputs
    if op == "matmul":
        a, b = values(ins[0]), values(ins[1])
        _acc(grads, ins[0], g @ b.T)
        _acc(grads, ins[1], a.T @ g)
    elif op == "add":
        _acc(grads, ins[0], g)
        _acc(grads, ins[1], g)
    elif op == "sub":
        _acc(grads, ins[0], g)
        _acc(grads, ins[1], -g)
    elif op == "mul":
        _acc(grads, ins[0], g * values(ins[1]))
        _acc(grads, ins[1], g * values(ins[0]))
    elif op == "smul":
        _acc(grads, ins[0], g * node.aux)
    elif op == "tanh":
        _acc(grads, ins[0], g * (1.0 - node.value * node.value))
    elif op == "sigmoid":
        _acc(grads, ins[0], g * node.value * (1.0 - node.value))
    elif op == "sin":
        _acc(grads, ins[0], g * np.cos(values(ins[0])))
    elif op == "cos":
        _acc(grads, ins[0], -g * np.sin(values(ins[0])))
    elif op == "sum":
        _acc(grads, ins[0], np.full(values(ins[0]).shape, g[0, 0]))
    elif op == "sumsq":
        _acc(grads, ins[0], (2.0 * g[0, 0]) * values(ins[0]))
    elif op == "vstack":
        off = 0
        for i in ins:
            r = values(i).shape[0]
            _acc(grads, i, g[off : off + r])
            off += r
    elif op == "rows":
        lo, hi = node.aux
        full = np.zeros(values(ins[0]).shape)
        full[lo:hi] = g
        _acc(grads, ins[0], full)
    # leaf / const: nothing flows further


class Tape:
    """Append-only record of primitive applications, in evaluation order.

    Node indices are a topological order by construction, so the reverse
    pass is a single deterministic backward sweep over indices.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def value(self, idx: int) -> np.ndarray:
        return self._nodes[idx].value

    def _record(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux=None) -> Var:
        self._nodes.append(_Node(op, inputs, value, aux))
        return Var(self, len(self._nodes) - 1)

    def leaf(self, value) -> Var:
        """A differentiable input (weights, initial conditions)."""
        return self._record("leaf", (), as_matrix(value))

    def constant(self, value) -> Var:
        """A non-differentiable input (data, fixed matrices)."""
        return self._record("const", (), as_matrix(value))

    def apply(self, op: str, *inputs: Var, aux=None) -> Var:
        if op not in PRIMITIVES:
            raise KeyError(f"unknown primitive {op!r}")
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise ValueError(f"{PRIMITIVES[op]}: inputs must be Vars of this tape")
        vals = tuple(v.value for v in inputs)
        out = _forward(op, vals, aux)
        return self._record(op, tuple(v.idx for v in inputs), out, aux)

    def backward(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of a scalar-valued node with respect to the given Vars.

        Visits each node at most once, in reverse creation order, accumulating
        additively over fan-out. Pure function of the tape: repeated calls
        return bit-identical arrays.
        """
        if output.tape is not self:
            raise ValueError("backward: output Var is not on this tape")
        if output.shape != (1, 1):
            raise ShapeError(
                f"backward: output must be scalar (1, 1), got {output.shape}"
            )
        nodes = self._nodes
        grads: list = [None] * len(nodes)
        grads[output.idx] = np.ones((1, 1))
        values = self.value
        for idx in range(output.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = nodes[idx]
            if node.op == "leaf" or node.op == "const":
                continue
            _backward(node, g, grads, values)
        out = []
        for v in wrt:
            if v.tape is not self:
                raise ValueError("backward: requested Var is not on this tape")
            g = grads[v.idx]
            out.append(np.zeros(v.shape) if g is None else g)
        return out


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


# ---------------------------------------------------------------------------
# dual-mode expression helpers: operate on Vars (recording) or ndarrays (eager)


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return tape.apply("matmul", _lift(tape, a), _lift(tape, b))


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a) + np.asarray(b)
    return tape.apply("add", _lift(tape, a), _lift(tape, b))


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a) - np.asarray(b)
    return tape.apply("sub", _lift(tape, a), _lift(tape, b))


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a) * np.asarray(b)
    return tape.apply("mul", _lift(tape, a), _lift(tape, b))


def smul(x, c: float):
    if isinstance(x, Var):
        return x.tape.apply("smul", x, aux=float(c))
    return np.asarray(x) * float(c)


def tanh(x):
    if isinstance(x, Var):
        return x.tape.apply("tanh", x)
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Var):
        return x.tape.apply("sigmoid", x)
    return expit(x)


def sin(x):
    if isinstance(x, Var):
        return x.tape.apply("sin", x)
    return np.sin(x)


def cos(x):
    if isinstance(x, Var):
        return x.tape.apply("cos", x)
    return np.cos(x)


def total(x):
    """Sum of all entries, as a (1, 1) matrix."""
    if isinstance(x, Var):
        return x.tape.apply("sum", x)
    return np.sum(np.asarray(x)).reshape(1, 1)


def sumsq(x):
    """Sum of squared entries, as a (1, 1) matrix."""
    if isinstance(x, Var):
        return x.tape.apply("sumsq", x)
    arr = np.asarray(x)
    return np.sum(arr * arr).reshape(1, 1)


def vstack(parts: Sequence):
    tape = _tape_of(*parts)
    if tape is None:
        return np.vstack([np.asarray(p) for p in parts])
    return tape.apply("vstack", *[_lift(tape, p) for p in parts])


def rows(x, lo: int, hi: int):
    if isinstance(x, Var):
        return x.tape.apply("rows", x, aux=(int(lo), int(hi)))
    return np.asarray(x)[lo:hi]


def ones_row(x):
    """A constant (1, cols(x)) row of ones, for explicit bias broadcasting."""
    if isinstance(x, Var):
        return x.tape.constant(np.ones((1, x.shape[1])))
    return np.ones((1, np.asarray(x).shape[1]))


def colsum(x):
    """Column sums: contract an (r, c) value to (1, c) via a ones row."""
    if isinstance(x, Var):
        left = x.tape.constant(np.ones((1, x.shape[0])))
        return x.tape.apply("matmul", left, x)
    arr = np.asarray(x)
    return np.ones((1, arr.shape[0])) @ arr


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    step: float = 1e-6,
) -> float:
    """Compare an analytic gradient against central differences.

    ``f`` maps a flat parameter vector to ``(value, gradient)``; the gradient
    must be a flat vector of the same length. Returns the max over
    coordinates of ``|analytic - central| / max(1, |central|)``.
    """
    point = np.asarray(point, dtype=np.float64).ravel()
    value, analytic = f(point)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if not np.isfinite(value):
        raise NonFiniteProbe(f"function value {value!r} at the base point")
    if analytic.shape != point.shape:
        raise ShapeError(
            f"analytic gradient has shape {analytic.shape}, expected {point.shape}"
        )
    worst = 0.0
    for i in range(point.size):
        probe = point.copy()
        probe[i] = point[i] + step
        up, _ = f(probe)
        probe[i] = point[i] - step
        down, _ = f(probe)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteProbe(
                f"non-finite probe value at coordinate {i}: f+={up!r}, f-={down!r}"
            )
        central = (up - down) / (2.0 * step)
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        if err > worst:
            worst = err
    return worst

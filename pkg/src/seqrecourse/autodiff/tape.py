"""Scalar reverse-mode autodiff on a flat, append-only tape.

Graph structure lives in four parallel arrays (op code, first input, second
input, constant payload). Sweeps over them are delegated to a kernel
backend: the compiled ``_kernel`` extension when it is importable, the
pure-Python ``_kernel_py`` otherwise. Both produce bit-identical results.

:class:`Var` is a thin handle onto a node. Arithmetic between handles (or a
handle and a float) appends nodes; arithmetic between plain floats stays
plain, so code written against the generic helpers in this module
(:func:`exp`, :func:`div`, :func:`relu`, ...) runs on either.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import _kernel_py

try:
    from . import _kernel as _compiled
except ImportError:  # extension not built
    _compiled = None

CONST, INPUT, ADD, SUB, MUL, DIV, NEG, EXP, LOG, ABS, MAX, MIN, RELU, POWC = range(14)

OP_NAMES = (
    "constant", "input", "add", "sub", "mul", "div", "neg",
    "exp", "log", "abs", "max", "min", "relu", "pow",
)
KINK_OPS = frozenset({ABS, MAX, MIN, RELU})

DIV_EPS = _kernel_py.DIV_EPS

_BACKENDS = {"python": _kernel_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def _default_backend() -> str:
    forced = os.environ.get("SEQRECOURSE_KERNEL", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(f"SEQRECOURSE_KERNEL={forced!r} is not available; have {sorted(_BACKENDS)}")
        return forced
    return "compiled" if "compiled" in _BACKENDS else "python"


BACKEND = _default_backend()


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    """Switch the default kernel for tapes created afterwards."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_BACKENDS)}")
    BACKEND = name


class AutodiffError(Exception):
    pass


class MissingBindingError(AutodiffError, KeyError):
    def __init__(self, slot: str):
        super().__init__(f"no binding for input slot {slot!r}")
        self.slot = slot

    def __str__(self) -> str:
        return self.args[0]


class DomainError(AutodiffError, ArithmeticError):
    """Division by a near-zero value, or log of a non-positive one."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class NonFiniteError(AutodiffError, ArithmeticError):
    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: float
    adjoint: float


_ARITY = {CONST: 0, INPUT: 0, NEG: 1, EXP: 1, LOG: 1, ABS: 1, RELU: 1, POWC: 1}


class Tape:
    """Append-only node list plus value/adjoint buffers.

    A tape and its buffers belong to one worker at a time.
    """

    def __init__(self, backend: str | None = None):
        self.backend = backend or BACKEND
        self._kernel = _BACKENDS[self.backend]
        self._ops: list[int] = []
        self._a: list[int] = []
        self._b: list[int] = []
        self._k: list[float] = []
        self.input_slots: dict[str, int] = {}
        self._consts: dict[tuple[float, float], int] = {}
        self._packed = None
        self._packed_len = -1
        self._values = None
        self._adjoints = None
        self._forward_len = -1
        self._backward_root = -1

    def __len__(self) -> int:
        return len(self._ops)

    def _push(self, op: int, a: int = 0, b: int = 0, k: float = 0.0) -> "Var":
        i = len(self._ops)
        self._ops.append(op)
        self._a.append(a)
        self._b.append(b)
        self._k.append(k)
        return Var(self, i)

    # -- construction -----------------------------------------------------

    def const(self, value: float) -> "Var":
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite constant {value!r}")
        key = (value, math.copysign(1.0, value))
        i = self._consts.get(key)
        if i is None:
            v = self._push(CONST, k=value)
            self._consts[key] = v.id
            return v
        return Var(self, i)

    def input(self, name: str) -> "Var":
        if name in self.input_slots:
            raise AutodiffError(f"input slot {name!r} already defined")
        v = self._push(INPUT)
        self.input_slots[name] = v.id
        return v

    def lift(self, x: "Var | float") -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise AutodiffError("cannot mix nodes from different tapes")
            return x
        return self.const(x)

    def unary(self, op: int, x: "Var", k: float = 0.0) -> "Var":
        return self._push(op, x.id, 0, k)

    def binary(self, op: int, x: "Var | float", y: "Var | float") -> "Var":
        return self._push(op, self.lift(x).id, self.lift(y).id)

    # -- evaluation -------------------------------------------------------

    def _pack(self):
        n = len(self._ops)
        if self._packed_len != n:
            if self.backend == "python":
                self._packed = (self._ops, self._a, self._b, self._k)
            else:
                self._packed = (
                    np.asarray(self._ops, dtype=np.int8),
                    np.asarray(self._a, dtype=np.intc),
                    np.asarray(self._b, dtype=np.intc),
                    np.asarray(self._k, dtype=np.float64),
                )
            self._packed_len = n
            if self.backend == "python":
                self._values = [0.0] * n
                self._adjoints = [0.0] * n
            else:
                self._values = np.zeros(n)
                self._adjoints = np.zeros(n)
            self._forward_len = -1
        return self._packed

    def forward(self, bindings: Mapping[str, float]):
        """Evaluate every node; returns the value buffer (indexed by node id)."""
        ops, a, b, k = self._pack()
        vals = self._values
        for name, i in self.input_slots.items():
            try:
                vals[i] = float(bindings[name])
            except KeyError:
                raise MissingBindingError(name) from None
        self._sweep(ops, a, b, k, vals)
        return vals

    def forward_slots(self, values: Sequence[float]):
        """Like :meth:`forward` but takes slot values in definition order."""
        ops, a, b, k = self._pack()
        vals = self._values
        for i, v in zip(self.input_slots.values(), values):
            vals[i] = float(v)
        self._sweep(ops, a, b, k, vals)
        return vals

    def _sweep(self, ops, a, b, k, vals):
        n = len(ops)
        self._forward_len = -1
        status, node = self._kernel.forward(ops, a, b, k, vals, n)
        if status == _kernel_py.DIV_ZERO:
            raise DomainError(f"division by |x| < {DIV_EPS:g} at node {node}", node)
        if status == _kernel_py.LOG_DOMAIN:
            raise DomainError(f"log of non-positive value at node {node}", node)
        if status == _kernel_py.NON_FINITE:
            raise NonFiniteError(f"non-finite value at node {node} ({OP_NAMES[ops[node]]})", node)
        self._forward_len = n
        self._backward_root = -1

    def _check_root(self, root: "Var | int") -> int:
        i = root.id if isinstance(root, Var) else int(root)
        if not 0 <= i < len(self._ops):
            raise AutodiffError(f"root {i} is not on this tape")
        if self._forward_len != len(self._ops):
            raise AutodiffError("forward() has not run on the current tape")
        return i

    def sweep_back(self, root: "Var | int"):
        """Run the reverse sweep; returns the full adjoint buffer."""
        i = self._check_root(root)
        ops, a, b, k = self._packed
        self._kernel.backward(ops, a, b, k, self._values, self._adjoints, i)
        self._backward_root = i
        return self._adjoints

    def backward(self, root: "Var | int") -> dict[str, float]:
        """d(root)/d(slot) for every input slot."""
        adj = self.sweep_back(root)
        return {name: float(adj[i]) for name, i in self.input_slots.items()}

    def value(self, x: "Var | float") -> float:
        if isinstance(x, Var):
            if self._forward_len != len(self._ops):
                raise AutodiffError("forward() has not run on the current tape")
            return float(self._values[x.id])
        return float(x)

    def node(self, i: int) -> Node:
        op = self._ops[i]
        arity = _ARITY.get(op, 2)
        inputs = (self._a[i], self._b[i])[:arity]
        value = float(self._values[i]) if self._forward_len == len(self._ops) else math.nan
        adjoint = float(self._adjoints[i]) if self._backward_root >= 0 else 0.0
        return Node(i, OP_NAMES[op], inputs, value, adjoint)

    def op_code(self, i: int) -> int:
        return self._ops[i]

    def operands(self, i: int) -> tuple[int, int]:
        return self._a[i], self._b[i]


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    def __repr__(self) -> str:
        return f"Var({self.id}, {OP_NAMES[self.tape.op_code(self.id)]})"

    @property
    def value(self) -> float:
        return self.tape.value(self)

    def __add__(self, other):
        return self.tape.binary(ADD, self, other)

    def __radd__(self, other):
        return self.tape.binary(ADD, other, self)

    def __sub__(self, other):
        return self.tape.binary(SUB, self, other)

    def __rsub__(self, other):
        return self.tape.binary(SUB, other, self)

    def __mul__(self, other):
        return self.tape.binary(MUL, self, other)

    def __rmul__(self, other):
        return self.tape.binary(MUL, other, self)

    def __truediv__(self, other):
        return self.tape.binary(DIV, self, other)

    def __rtruediv__(self, other):
        return self.tape.binary(DIV, other, self)

    def __neg__(self):
        return self.tape.unary(NEG, self)

    def __pow__(self, k):
        if isinstance(k, Var):
            raise TypeError("exponent must be a constant")
        return self.tape.unary(POWC, self, float(k))


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def div(x, y):
    """Checked division: |y| < 1e-12 is an error on either path."""
    t = _tape_of(x, y)
    if t is not None:
        return t.binary(DIV, x, y)
    if -DIV_EPS < y < DIV_EPS:
        raise DomainError(f"division by |x| < {DIV_EPS:g} ({y!r})")
    return x / y


def exp(x):
    if isinstance(x, Var):
        return x.tape.unary(EXP, x)
    try:
        return math.exp(x)
    except OverflowError:
        raise NonFiniteError(f"exp({x!r}) overflows") from None


def log(x):
    if isinstance(x, Var):
        return x.tape.unary(LOG, x)
    if not x > 0.0:
        raise DomainError(f"log of non-positive value {x!r}")
    return math.log(x)


def fabs(x):
    if isinstance(x, Var):
        return x.tape.unary(ABS, x)
    return math.fabs(x)


def relu(x):
    if isinstance(x, Var):
        return x.tape.unary(RELU, x)
    return x if x > 0.0 else 0.0


def maximum(x, y):
    t = _tape_of(x, y)
    if t is not None:
        return t.binary(MAX, x, y)
    return x if x >= y else y


def minimum(x, y):
    t = _tape_of(x, y)
    if t is not None:
        return t.binary(MIN, x, y)
    return x if x <= y else y


def power(x, k: float):
    if isinstance(x, Var):
        return x ** k
    try:
        v = math.pow(x, float(k))
    except (ValueError, OverflowError):
        raise NonFiniteError(f"pow({x!r}, {k!r}) is not finite") from None
    return v


def value_of(x) -> float:
    """Current numeric value of a handle or plain number."""
    return x.value if isinstance(x, Var) else float(x)

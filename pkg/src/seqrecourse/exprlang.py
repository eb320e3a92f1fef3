"""A small expression language for action transforms, costs and preconditions.

Grammar (whitespace-insensitive)::

    pred    := atom ('&&' atom)*
    atom    := expr cmp expr              cmp: < > <= >= (also ≤ ≥)
    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := primary ('^' ['-'] NUMBER)?
    primary := NUMBER | ref | func '(' expr (',' expr)* ')' | '(' expr ')'
    ref     := 'x[' name ']' | 'xn[' name ']' | 'x0[' name ']' | 'p[' int ']'
    func    := exp | log | abs | relu | max | min

``x[f]`` is feature ``f`` of the state the action is applied to (raw units),
``xn[f]`` the same value normalized the way the model sees it, ``x0[f]`` the
value in the original instance before any action ran, and ``p[i]`` the
action's i-th parameter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

from . import autodiff as ad
from .nnmodel import FeatureSchema


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


class ExprNameError(ValueError):
    pass


# -- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Feat:
    name: str
    space: str = "x"  # "x" | "xn" | "x0"


@dataclass(frozen=True)
class Param:
    index: int


@dataclass(frozen=True)
class Unary:
    op: str  # neg exp log abs relu
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # + - * / max min
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: float


Expr = Union[Num, Feat, Param, Unary, Binary, Pow]


@dataclass(frozen=True)
class Atom:
    lhs: Expr
    cmp: str  # < > <= >=
    rhs: Expr


@dataclass(frozen=True)
class Pred:
    atoms: tuple[Atom, ...]


TRUE = Pred(())

_UNARY_FUNCS = {"exp", "log", "abs", "relu"}
_BINARY_FUNCS = {"max", "min"}

# -- lexer -----------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<ref>(?:xn|x0|x|p)\s*\[(?P<refname>[^\]\n]*)\])
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|&&|≤|≥|[-+*/^(),<>])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int
    payload: object = None


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        text = m.group(0)
        col = pos - line_start + 1
        if m.group("ws") is not None:
            nl = text.count("\n")
            if nl:
                line += nl
                line_start = pos + text.rindex("\n") + 1
        elif m.group("ref") is not None:
            head = text[: text.index("[")].strip()
            name = m.group("refname").strip()
            if not name:
                raise ExprSyntaxError("empty reference", line, col)
            toks.append(_Tok("ref", text, line, col, (head, name)))
        elif m.group("num") is not None:
            toks.append(_Tok("num", text, line, col, float(text)))
        elif m.group("ident") is not None:
            toks.append(_Tok("ident", text, line, col))
        else:
            op = {"≤": "<=", "≥": ">="}.get(text, text)
            toks.append(_Tok("op", op, line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


# -- parser ----------------------------------------------------------------

class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None):
        t = tok or self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise ExprSyntaxError(f"{msg}, found {found}", t.line, t.col)

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def accept(self, op: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == op:
            self.i += 1
            return True
        return False

    def expect(self, op: str):
        if not self.accept(op):
            self.error(f"expected {op!r}")

    def pred_or_expr(self):
        lhs = self.expr()
        if self.tok.kind == "op" and self.tok.text in ("<", ">", "<=", ">="):
            atoms = [self.atom_rest(lhs)]
            while self.accept("&&"):
                atoms.append(self.atom_rest(self.expr()))
            node = Pred(tuple(atoms))
        else:
            node = lhs
        if self.tok.kind != "eof":
            self.error("unexpected token")
        return node

    def atom_rest(self, lhs: Expr) -> Atom:
        t = self.tok
        if not (t.kind == "op" and t.text in ("<", ">", "<=", ">=")):
            self.error("expected comparison operator")
        self.i += 1
        return Atom(lhs, t.text, self.expr())

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.take().text
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.take().text
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.accept("-"):
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.accept("^"):
            neg = self.accept("-")
            t = self.tok
            if t.kind != "num":
                self.error("exponent must be a numeric constant")
            self.i += 1
            return Pow(base, -t.payload if neg else t.payload)
        return base

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Num(t.payload)
        if t.kind == "ref":
            self.i += 1
            head, name = t.payload
            if head == "p":
                if not name.isdigit():
                    raise ExprSyntaxError(f"parameter index must be a non-negative integer, got {name!r}",
                                          t.line, t.col)
                return Param(int(name))
            return Feat(name, head)
        if t.kind == "ident":
            if t.text in _UNARY_FUNCS or t.text in _BINARY_FUNCS:
                self.i += 1
                self.expect("(")
                args = [self.expr()]
                while self.accept(","):
                    args.append(self.expr())
                self.expect(")")
                want = 1 if t.text in _UNARY_FUNCS else 2
                if len(args) != want:
                    raise ExprSyntaxError(f"{t.text}() takes {want} argument(s), got {len(args)}",
                                          t.line, t.col)
                if want == 1:
                    return Unary(t.text, args[0])
                return Binary(t.text, args[0], args[1])
            raise ExprNameError(f"unknown identifier {t.text!r} at line {t.line}, column {t.col}")
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        self.error("expected an expression")


def parse(src: str) -> Expr | Pred:
    """Parse an expression, or a conjunction of comparisons."""
    return _Parser(src).pred_or_expr()


def parse_expr(src: str) -> Expr:
    node = parse(src)
    if isinstance(node, Pred):
        raise ExprSyntaxError("expected an arithmetic expression, not a comparison", 1, 1)
    return node


def parse_pred(src: str) -> Pred:
    """Parse a precondition; an empty/blank string or ``true`` means no constraint."""
    if not src.strip() or src.strip() == "true":
        return TRUE
    node = parse(src)
    if not isinstance(node, Pred):
        raise ExprSyntaxError("expected a comparison", 1, 1)
    return node


# -- printer ---------------------------------------------------------------

def _fmt_num(v: float) -> str:
    return repr(float(v))


def to_source(node) -> str:
    if isinstance(node, Pred):
        return " && ".join(to_source(a) for a in node.atoms) if node.atoms else "true"
    if isinstance(node, Atom):
        return f"{to_source(node.lhs)} {node.cmp} {to_source(node.rhs)}"
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Feat):
        return f"{node.space}[{node.name}]"
    if isinstance(node, Param):
        return f"p[{node.index}]"
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{to_source(node.arg)})"
        return f"{node.op}({to_source(node.arg)})"
    if isinstance(node, Binary):
        if node.op in _BINARY_FUNCS:
            return f"{node.op}({to_source(node.left)}, {to_source(node.right)})"
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Pow):
        base = to_source(node.base)
        if not isinstance(node.base, (Feat, Param)):
            base = f"({base})"
        return f"{base}^{_fmt_num(node.exponent)}"
    raise TypeError(f"not an expression node: {node!r}")


# -- analysis --------------------------------------------------------------

def walk(node):
    yield node
    if isinstance(node, Pred):
        for a in node.atoms:
            yield from walk(a)
    elif isinstance(node, Atom):
        yield from walk(node.lhs)
        yield from walk(node.rhs)
    elif isinstance(node, Unary):
        yield from walk(node.arg)
    elif isinstance(node, Binary):
        yield from walk(node.left)
        yield from walk(node.right)
    elif isinstance(node, Pow):
        yield from walk(node.base)


def features_in(node) -> set[tuple[str, str]]:
    """``(space, name)`` pairs referenced anywhere in ``node``."""
    return {(n.space, n.name) for n in walk(node) if isinstance(n, Feat)}


def params_in(node) -> set[int]:
    return {n.index for n in walk(node) if isinstance(n, Param)}


def check_names(node, schema: FeatureSchema, n_params: int, where: str = "expression") -> None:
    for n in walk(node):
        if isinstance(n, Feat) and n.name not in schema:
            raise ExprNameError(f"{where}: unknown feature {n.name!r}")
        if isinstance(n, Param) and n.index >= n_params:
            raise ExprNameError(f"{where}: p[{n.index}] out of range (action has {n_params} parameter(s))")


# -- evaluation / compilation ----------------------------------------------

@dataclass(frozen=True)
class Env:
    """Name bindings: current state ``x``, original instance ``x0``, params ``p``.

    Elements of ``x`` and ``p`` may be floats or tape handles.
    """

    schema: FeatureSchema
    x: Sequence
    x0: Sequence[float]
    p: Sequence = ()


def emit(node: Expr, env: Env):
    """Evaluate ``node``; returns a float or a tape handle."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Feat):
        try:
            j = env.schema.index(node.name)
        except KeyError:
            raise ExprNameError(f"unknown feature {node.name!r}") from None
        if node.space == "x":
            return env.x[j]
        if node.space == "x0":
            return float(env.x0[j])
        return env.schema.normalize_one(j, env.x[j])
    if isinstance(node, Param):
        if node.index >= len(env.p):
            raise ExprNameError(f"p[{node.index}] out of range ({len(env.p)} parameter(s))")
        return env.p[node.index]
    if isinstance(node, Unary):
        v = emit(node.arg, env)
        if node.op == "neg":
            return -v
        if node.op == "exp":
            return ad.exp(v)
        if node.op == "log":
            return ad.log(v)
        if node.op == "abs":
            return ad.fabs(v)
        if node.op == "relu":
            return ad.relu(v)
        raise ValueError(f"unknown unary op {node.op!r}")
    if isinstance(node, Binary):
        a, b = emit(node.left, env), emit(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return ad.div(a, b)
        if node.op == "max":
            return ad.maximum(a, b)
        if node.op == "min":
            return ad.minimum(a, b)
        raise ValueError(f"unknown binary op {node.op!r}")
    if isinstance(node, Pow):
        return ad.power(emit(node.base, env), node.exponent)
    raise TypeError(f"not an expression node: {node!r}")


def compile_expr(node: Expr, tape: ad.Tape, env: Env) -> ad.Var:
    """Emit ``node`` onto ``tape`` and return its root handle."""
    return tape.lift(emit(node, env))


def evaluate(node: Expr, env: Env) -> float:
    return ad.value_of(emit(node, env))


def holds(cmp: str, lhs: float, rhs: float) -> bool:
    if cmp == ">":
        return lhs > rhs
    if cmp == "<":
        return lhs < rhs
    if cmp == ">=":
        return lhs >= rhs
    if cmp == "<=":
        return lhs <= rhs
    raise ValueError(f"unknown comparison {cmp!r}")


def eval_atom(atom: Atom, env: Env) -> bool:
    return holds(atom.cmp, evaluate(atom.lhs, env), evaluate(atom.rhs, env))


def eval_pred(pred: Pred | Atom, env: Env) -> bool:
    """Exact Boolean value of a conjunction (strictness honoured)."""
    if isinstance(pred, Atom):
        return eval_atom(pred, env)
    return all(eval_atom(a, env) for a in pred.atoms)


def slack(atom: Atom, env: Env):
    """Signed distance into the satisfied side: ``lhs - rhs`` for > / >=, else ``rhs - lhs``."""
    lhs, rhs = emit(atom.lhs, env), emit(atom.rhs, env)
    return lhs - rhs if atom.cmp in (">", ">=") else rhs - lhs

"""Small recursive-descent parser for coefficient expressions.

Grammar (whitespace-insensitive)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

``NAME`` is ``x`` or a named parameter. ``-x^2`` parses as ``-(x^2)``.
Expressions compile to plain Python functions that work on floats (via
:mod:`math`) or on numpy arrays.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

FUNCTIONS = ("sin", "cos", "tanh", "exp", "ln", "sqrt", "abs")

_NP_FUNCS = {
    "sin": "np.sin", "cos": "np.cos", "tanh": "np.tanh", "exp": "np.exp",
    "ln": "np.log", "sqrt": "np.sqrt", "abs": "np.abs",
}
_MATH_FUNCS = {
    "sin": "math.sin", "cos": "math.cos", "tanh": "math.tanh", "exp": "math.exp",
    "ln": "math.log", "sqrt": "math.sqrt", "abs": "abs",
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``pos`` is the 0-based character offset."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


# AST nodes


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    arg: object


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def tokenize(src: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ExpressionError(f"unexpected character {src[bad]!r}", bad)
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str, names: frozenset[str]):
        self.src = src
        self.toks = tokenize(src)
        self.i = 0
        self.names = names

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ExpressionError(f"expected {text!r}, found {found!r}", self.tok.pos)
        self.advance()

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ExpressionError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return node

    def expr(self):
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.tok.text == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.text == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "name":
            self.advance()
            if tok.text in FUNCTIONS:
                if self.tok.text != "(":
                    raise ExpressionError(f"function {tok.text!r} needs '('", self.tok.pos)
                self.advance()
                arg = self.expr()
                self.expect(")")
                return Call(tok.text, arg)
            if tok.text != "x" and tok.text not in self.names:
                raise ExpressionError(f"unknown name {tok.text!r}", tok.pos)
            return Var(tok.text)
        if tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = tok.text or "end of input"
        raise ExpressionError(f"unexpected {found!r}", tok.pos)


def parse(src: str, params: Mapping[str, float] | None = None):
    """Parse ``src`` into an AST. Names other than ``x`` must appear in ``params``."""
    names = frozenset(params or ())
    bad = names & set(FUNCTIONS)
    if bad:
        raise ExpressionError(f"parameter name shadows function {sorted(bad)[0]!r}", 0)
    return _Parser(src, names).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def unparse(node) -> str:
    """Render an AST back to source. Always re-parses to the same tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"-({unparse(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({unparse(node.arg)})"
    if isinstance(node, BinOp):
        return f"({unparse(node.left)}){node.op}({unparse(node.right)})"
    raise TypeError(f"not an expression node: {node!r}")


def _to_source(node, funcs: Mapping[str, str]) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return "x" if node.name == "x" else f"p[{node.name!r}]"
    if isinstance(node, Neg):
        return f"(-{_to_source(node.arg, funcs)})"
    if isinstance(node, Call):
        return f"{funcs[node.func]}({_to_source(node.arg, funcs)})"
    op = "**" if node.op == "^" else node.op
    return f"({_to_source(node.left, funcs)} {op} {_to_source(node.right, funcs)})"


def compile_expr(node, params: Mapping[str, float] | None = None, *, scalar: bool = False) -> Callable:
    """Compile an AST into ``f(x)``.

    ``scalar=True`` uses :mod:`math` (fast on Python floats, fails on arrays);
    the default uses numpy and broadcasts. The generated source only ever
    comes from a parsed tree, never from user text directly.
    """
    src = _to_source(node, _MATH_FUNCS if scalar else _NP_FUNCS)
    env = {"np": np, "math": math, "p": dict(params or {})}
    fn = eval(f"lambda x: {src}", env)  # noqa: S307
    if scalar:
        return fn
    return lambda x: np.asarray(fn(np.asarray(x, dtype=float)), dtype=float) + np.zeros_like(x, dtype=float)

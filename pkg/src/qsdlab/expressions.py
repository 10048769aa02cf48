"""Arithmetic mini-grammar for drift/killing expressions in model JSON files.

Grammar (no eval(), no names other than the whitelist):

    expr    := term (('+'|'-') term)*
    term    := unary (('*'|'/') unary)*
    unary   := ('+'|'-') unary | power
    power   := atom ('^' unary)?          # right-associative
    atom    := NUMBER | 'x' | 'pi' | 'e' | FUNC '(' expr ')' | '(' expr ')'
    FUNC    := exp | log | sqrt | sin | cos | sinh | cosh | tanh | abs

Compiled expressions evaluate on floats and numpy arrays alike.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Union

import numpy as np

Number = Union[float, np.ndarray]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)

_FUNCS: dict = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "abs": np.abs,
}

_CONSTS = {"pi": math.pi, "e": math.e}


class ExpressionError(ValueError):
    """Raised for syntax errors or unknown names in an expression string."""


def _tokenize(src: str):
    pos, out = 0, []
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            rest = src[pos:].strip()
            if not rest:
                break
            raise ExpressionError(f"cannot tokenize {rest!r} in expression {src!r}")
        if m.lastgroup is not None:
            kind = m.lastgroup
            text = m.group(kind)
            if kind == "op" and text == "**":
                text = "^"
            out.append((kind, text))
        pos = m.end()
    out.append(("end", ""))
    return out


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, op=None):
        kind, text = self.toks[self.i]
        if op is not None and (kind != "op" or text != op):
            raise ExpressionError(f"expected {op!r} at token {self.i} in {self.src!r}")
        self.i += 1
        return kind, text

    # Each production returns a closure f(x) -> value.
    def expr(self):
        f = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.take()
            g = self.term()
            if op == "+":
                f = (lambda a, b: lambda x: a(x) + b(x))(f, g)
            else:
                f = (lambda a, b: lambda x: a(x) - b(x))(f, g)
        return f

    def term(self):
        f = self.unary()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.take()
            g = self.unary()
            if op == "*":
                f = (lambda a, b: lambda x: a(x) * b(x))(f, g)
            else:
                f = (lambda a, b: lambda x: a(x) / b(x))(f, g)
        return f

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            g = self.unary()
            return lambda x: -g(x)
        if self.peek() == ("op", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            expo = self.unary()
            return lambda x: base(x) ** expo(x)
        return base

    def atom(self):
        kind, text = self.peek()
        if kind == "num":
            self.take()
            val = float(text)
            return lambda x: val
        if kind == "name":
            self.take()
            if text == "x":
                return lambda x: x
            if text in _CONSTS:
                val = _CONSTS[text]
                return lambda x: val
            if text in _FUNCS:
                fn = _FUNCS[text]
                self.take("(")
                inner = self.expr()
                self.take(")")
                return lambda x: fn(inner(x))
            raise ExpressionError(f"unknown name {text!r} in {self.src!r}")
        if (kind, text) == ("op", "("):
            self.take()
            inner = self.expr()
            self.take(")")
            return inner
        raise ExpressionError(f"unexpected token {text!r} in {self.src!r}")


def compile_expression(src: str) -> Callable[[Number], Number]:
    """Compile an expression in the mini-grammar to a callable of x."""
    if not isinstance(src, str) or not src.strip():
        raise ExpressionError("empty expression")
    p = _Parser(src)
    f = p.expr()
    if p.peek()[0] != "end":
        raise ExpressionError(f"trailing tokens in {src!r}")
    # force early failure on bad expressions
    try:
        f(1.2345)
    except ExpressionError:
        raise
    except ZeroDivisionError:
        pass

    def fx(x):
        out = f(x)
        # constants collapse to scalars; keep the input's shape so the
        # callable stays safely vectorized
        if np.ndim(out) == 0 and np.ndim(x) > 0:
            return np.full(np.shape(x), float(out))
        return out

    return fx

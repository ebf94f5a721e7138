"""Tiny arithmetic-expression compiler for SDE coefficients c(x).

Supports numbers, the variable x, pi, + - * / ** with parentheses, unary
signs and abs(...).  Deliberately not eval(): the grammar is the whole
attack surface we want.
"""

from __future__ import annotations

import math
import re

import numpy as np

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>\*\*|[()+\-*/]))"
)


class ExprError(ValueError):
    pass


def _tokenize(s: str):
    pos, out = 0, []
    while pos < len(s):
        m = _TOKEN.match(s, pos)
        if not m:
            raise ExprError(f"bad character at {s[pos:]!r}")
        pos = m.end()
        if m.lastgroup == "num":
            out.append(("num", float(m.group("num"))))
        elif m.lastgroup == "name":
            out.append(("name", m.group("name")))
        else:
            out.append(("op", m.group("op")))
    out.append(("end", None))
    return out


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        kind, val = self.next()
        if kind != "op" or val != op:
            raise ExprError(f"expected {op!r}, got {val!r}")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ExprError(f"trailing input at {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            op = self.next()[1]
            rhs = self.term()
            node = (op, node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            op = self.next()[1]
            rhs = self.unary()
            node = (op, node, rhs)
        return node

    def unary(self):
        if self.peek() == ("op", "-"):
            self.next()
            return ("neg", self.unary())
        if self.peek() == ("op", "+"):
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("op", "**"):
            self.next()
            return ("**", base, self.unary())
        return base

    def atom(self):
        kind, val = self.next()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            if val == "x":
                return ("x",)
            if val == "pi":
                return ("num", math.pi)
            if val == "abs":
                self.expect("(")
                inner = self.expr()
                self.expect(")")
                return ("abs", inner)
            raise ExprError(f"unknown name {val!r}")
        if (kind, val) == ("op", "("):
            inner = self.expr()
            self.expect(")")
            return inner
        raise ExprError(f"unexpected token {val!r}")


def _eval_node(node, x):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "x":
        return x
    if op == "neg":
        return -_eval_node(node[1], x)
    if op == "abs":
        return np.abs(_eval_node(node[1], x))
    a = _eval_node(node[1], x)
    b = _eval_node(node[2], x)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    if op == "**":
        return a**b
    raise ExprError(f"bad node {op!r}")


def compile_expression(source: str):
    """Compile a c(x) expression into a numpy-vectorized callable.

    Caret is accepted as a power operator alias.
    """
    tree = _Parser(_tokenize(source.replace("^", "**"))).parse()

    def fn(x):
        return np.broadcast_to(np.asarray(_eval_node(tree, np.asarray(x, dtype=float)),
                                          dtype=float), np.shape(x)).copy() \
            if np.ndim(x) else float(_eval_node(tree, float(x)))

    fn.source = source
    return fn

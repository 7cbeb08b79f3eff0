"""A small arithmetic expression language over (t, x1, ..., xn).

Grammar (Pratt parser). Operators, from loosest to tightest binding:

=========  =============  =============
level      operators      associativity
=========  =============  =============
10         ``+  -``       left
20         ``*  /``       left
30         unary ``- +``  prefix
40         ``^`` ``**``   right
50         ``f(...)``     function call
=========  =============  =============

Atoms are decimal numbers (``0.2``, ``3``, ``1e-3``), the variables ``t`` and
``x1 .. xn``, the constant ``pi`` and parenthesised expressions. Functions:
``sin``, ``cos``, ``exp``, ``sqrt``, ``abs``. Note that ``-x^2`` parses as
``-(x^2)``. Numbers are kept as exact fractions until evaluation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, List, Tuple, Union

import numpy as np


class ExpressionError(ValueError):
    pass


FUNCTIONS: Dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

BINARY = {"+": (10, "left"), "-": (10, "left"), "*": (20, "left"), "/": (20, "left"),
          "^": (40, "right"), "**": (40, "right")}
PREFIX = 30

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
                    r"|(\*\*|[-+*/^(),])|([A-Za-z_][A-Za-z_0-9]*))")


@dataclass(frozen=True)
class Node:
    kind: str  # num, var, neg, bin, call
    value: Union[Fraction, str, None] = None
    args: Tuple["Node", ...] = ()

    def variables(self) -> FrozenSet[str]:
        if self.kind == "var":
            return frozenset([self.value]) if self.value != "pi" else frozenset()
        out = frozenset()
        for a in self.args:
            out |= a.variables()
        return out

    def __str__(self) -> str:
        if self.kind == "num":
            return str(self.value)
        if self.kind == "var":
            return self.value
        if self.kind == "neg":
            return f"(-{self.args[0]})"
        if self.kind == "bin":
            return f"({self.args[0]} {self.value} {self.args[1]})"
        return f"{self.value}({', '.join(map(str, self.args))})"


def tokenize(text: str) -> List[Tuple[str, str]]:
    pos = 0
    out = []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExpressionError(f"unexpected character {text[pos]!r} at {pos}")
        num, op, name = m.groups()
        if num is not None:
            out.append(("num", num))
        elif op is not None:
            out.append(("op", op))
        else:
            out.append(("name", name))
        pos = m.end()
    out.append(("end", ""))
    return out


class _Parser:
    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        kind, val = self.take()
        if kind != "op" or val != op:
            raise ExpressionError(f"expected {op!r}, found {val or kind!r}")

    def parse(self, rbp: int = 0) -> Node:
        left = self.nud(self.take())
        while True:
            kind, val = self.peek()
            if kind != "op" or val not in BINARY:
                break
            lbp, assoc = BINARY[val]
            if lbp <= rbp:
                break
            self.take()
            right = self.parse(lbp - 1 if assoc == "right" else lbp)
            left = Node("bin", "^" if val == "**" else val, (left, right))
        return left

    def nud(self, tok) -> Node:
        kind, val = tok
        if kind == "num":
            return Node("num", Fraction(val))
        if kind == "op" and val in "+-":
            operand = self.parse(PREFIX)
            return operand if val == "+" else Node("neg", None, (operand,))
        if kind == "op" and val == "(":
            inner = self.parse(0)
            self.expect(")")
            return inner
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.parse(0)
                self.expect(")")
                return Node("call", val, (arg,))
            if val == "pi" or val in self.variables:
                return Node("var", val)
            raise ExpressionError(f"unknown name {val!r}")
        raise ExpressionError(f"unexpected token {val or kind!r}")


def parse_expression(text: str, n: int) -> "Expression":
    """Parse ``text`` as a function of (t, x1..xn)."""
    variables = {"t"} | {f"x{i + 1}" for i in range(n)}
    p = _Parser(tokenize(text), variables)
    node = p.parse(0)
    if p.peek()[0] != "end":
        raise ExpressionError(f"trailing input at token {p.peek()[1]!r}")
    return Expression(node, n, text)


@dataclass(frozen=True)
class Expression:
    node: Node
    n: int
    source: str = ""

    @property
    def variables(self) -> FrozenSet[str]:
        return self.node.variables()

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def __call__(self, t, x) -> np.ndarray:
        """Evaluate at time(s) t and points x with shape (..., n)."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(t.shape, x.shape[:-1])
        env = {"t": np.broadcast_to(t, shape), "pi": math.pi}
        for i in range(self.n):
            env[f"x{i + 1}"] = np.broadcast_to(x[..., i], shape)
        out = _eval(self.node, env)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    def __str__(self) -> str:
        return self.source or str(self.node)


def _eval(node: Node, env):
    if node.kind == "num":
        return float(node.value)
    if node.kind == "var":
        return env[node.value]
    if node.kind == "neg":
        return -_eval(node.args[0], env)
    if node.kind == "call":
        return FUNCTIONS[node.value](_eval(node.args[0], env))
    a = _eval(node.args[0], env)
    b = _eval(node.args[1], env)
    op = node.value
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return np.power(a, b)

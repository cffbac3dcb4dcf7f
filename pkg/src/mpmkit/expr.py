"""Arithmetic rate expressions.

Rates are written as plain arithmetic over variable and parameter names,
for example ``k_b * X2 * X3 / N``.  Precedence, tightest first, is
``^`` (right associative), unary minus, ``* /``, ``+ -``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Union

import numpy as np

__all__ = [
    "Const",
    "Sym",
    "Neg",
    "BinOp",
    "RateExpr",
    "ExprSyntaxError",
    "EvaluationError",
    "parse_rate_expr",
    "substitute",
    "linear_combination",
]


class ExprSyntaxError(ValueError):
    """Raised on malformed expression text.

    ``offset`` is the 1-based character position where parsing failed
    (one past the last character for premature end of input).
    """

    def __init__(self, message: str, text: str, offset: int):
        self.text = text
        self.offset = offset
        super().__init__(f"{message} at offset {offset} in {text!r}")


class EvaluationError(ArithmeticError):
    """Division by zero, 0^negative or a negative base with a fractional exponent."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Sym:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "RateExpr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "RateExpr"
    right: "RateExpr"


RateExpr = Union[Const, Sym, Neg, BinOp]

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_UNARY_PREC = 3


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[start]!r}", text, start + 1)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    tokens.append(("end", "", len(text) + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message, tok=None):
        tok = tok or self.peek()
        if tok[0] == "end":
            message = "unexpected end of input"
        raise ExprSyntaxError(message, self.text, tok[2])

    def parse(self) -> RateExpr:
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        if self.peek()[0] == "op" and self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, value, _ = tok = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            return Sym(value)
        if kind == "op" and value == "(":
            node = self.expr()
            if self.peek()[1] != ")":
                self.fail("expected ')'")
            self.take()
            return node
        self.fail(f"unexpected token {value!r}", tok)


def parse_rate_expr(text: str) -> RateExpr:
    """Parse ``text`` into an expression tree."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# printing


def _fmt_number(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _prec(node: RateExpr) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _UNARY_PREC
    if isinstance(node, Const) and (node.value < 0 or math.copysign(1, node.value) < 0):
        return 0
    return 5


def to_string(node: RateExpr) -> str:
    """Render with the minimum parentheses needed to re-parse the same tree."""
    if isinstance(node, Const):
        s = _fmt_number(node.value)
        return f"({s})" if _prec(node) == 0 else s
    if isinstance(node, Sym):
        return node.name
    if isinstance(node, Neg):
        inner = to_string(node.operand)
        if _prec(node.operand) < _UNARY_PREC:
            inner = f"({inner})"
        return "-" + inner
    p = _PREC[node.op]
    left, right = to_string(node.left), to_string(node.right)
    if node.op == "^":
        # base must be an atom; exponent may be a power or unary minus
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < _UNARY_PREC:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def symbols(node: RateExpr) -> frozenset[str]:
    if isinstance(node, Sym):
        return frozenset([node.name])
    if isinstance(node, Const):
        return frozenset()
    if isinstance(node, Neg):
        return symbols(node.operand)
    return symbols(node.left) | symbols(node.right)


# ---------------------------------------------------------------------------
# evaluation


def _pow(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.power(a, b)
    if a == 0 and b < 0:
        raise EvaluationError("0 raised to a negative power")
    if a < 0 and b != int(b):
        raise EvaluationError(f"negative base {a} with fractional exponent {b}")
    return math.pow(a, b)


def evaluate(node: RateExpr, env: Mapping[str, float]):
    """Reference tree-walking evaluator.

    Works on floats and on numpy arrays (elementwise).  Scalar failures raise
    :class:`EvaluationError`; array failures raise it when any element is
    non-finite.
    """
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            return _eval(node, env)
    except (ZeroDivisionError, FloatingPointError) as exc:
        raise EvaluationError(str(exc)) from exc


def _eval(node, env):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Sym):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"unbound symbol {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    a, b = _eval(node.left, env), _eval(node.right, env)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if not isinstance(b, np.ndarray) and not isinstance(a, np.ndarray) and b == 0:
            raise EvaluationError("division by zero")
        return a / b
    return _pow(a, b)


def to_python(node: RateExpr, name_of: Callable[[str], str], pow_name: str = "_pow") -> str:
    """Python source for ``node``; ``name_of`` maps symbols to source fragments."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Sym):
        return name_of(node.name)
    if isinstance(node, Neg):
        return f"(-{to_python(node.operand, name_of, pow_name)})"
    a = to_python(node.left, name_of, pow_name)
    b = to_python(node.right, name_of, pow_name)
    if node.op == "^":
        return f"{pow_name}({a}, {b})"
    return f"({a} {node.op} {b})"


def compile_expr(node: RateExpr, argnames: Iterable[str]) -> Callable:
    """Compile to a numpy-friendly function of the given symbols (positional)."""
    argnames = list(argnames)
    index = {name: f"_a{i}" for i, name in enumerate(argnames)}
    missing = symbols(node) - set(index)
    if missing:
        raise KeyError(f"unbound symbols {sorted(missing)}")
    src = f"def _f({', '.join(index.values())}):\n    return {to_python(node, index.__getitem__, '_np_pow')}\n"
    ns = {"_np_pow": np.power}
    exec(src, ns)
    return ns["_f"]


def is_constant(node: RateExpr, constants: frozenset[str] | set[str]) -> bool:
    return symbols(node) <= set(constants)


# ---------------------------------------------------------------------------
# tree rewriting


def substitute(node: RateExpr, mapping: Mapping[str, RateExpr]) -> RateExpr:
    if isinstance(node, Sym):
        return mapping.get(node.name, node)
    if isinstance(node, Const):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, mapping))
    return BinOp(node.op, substitute(node.left, mapping), substitute(node.right, mapping))


def _coef_node(c) -> RateExpr:
    from fractions import Fraction

    c = Fraction(c)
    if c.denominator == 1:
        return Const(float(c.numerator))
    return BinOp("/", Const(float(c.numerator)), Const(float(c.denominator)))


def linear_combination(terms: Iterable[tuple[object, str]]) -> RateExpr:
    """Build ``sum(c * name)`` from rational coefficients, skipping zeros.

    Unit coefficients produce bare symbols, so permutations and unit-vector
    changes of basis yield plain renamings.
    """
    from fractions import Fraction

    node: RateExpr | None = None
    for c, name in terms:
        c = Fraction(c)
        if c == 0:
            continue
        mag = abs(c)
        piece: RateExpr = Sym(name) if mag == 1 else BinOp("*", _coef_node(mag), Sym(name))
        if node is None:
            node = Neg(piece) if c < 0 else piece
        else:
            node = BinOp("-" if c < 0 else "+", node, piece)
    return node if node is not None else Const(0.0)

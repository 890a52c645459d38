"""Scalar expressions over state, input and noise variables.

Expressions are immutable trees built from the node classes below. They are
produced by :func:`parse_expr`, evaluated pointwise with :func:`evaluate`
(scalars or numpy batches), enclosed over boxes with :func:`interval_eval`,
and differentiated symbolically with :func:`differentiate`.

Text grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ['-'] atom ['^' uint]
    atom   := number | ident | func '(' expr [',' expr] ')' | '(' expr ')'
    ident  := 'x'uint | 'u'uint | 'w'uint        (1-based)

Unary minus binds tighter than ``^``: ``-x1^2`` is ``(-x1)^2``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    DivisionNearZero,
    ExprSyntaxError,
    IndexOutOfRange,
    IntervalDivisionByZero,
    NonDifferentiableNode,
    NonFiniteBound,
    NonFiniteResult,
    UnknownIdentifier,
)

VAR_KINDS = ("x", "u", "w")
UNARY_FUNCS = ("exp", "sin", "cos", "tanh", "abs")
BINARY_FUNCS = ("min", "max")
DIV_GUARD = 1e-300


# --------------------------------------------------------------------------
# Intervals and boxes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}]")

    @property
    def width(self):
        return self.hi - self.lo

    def contains(self, v):
        return self.lo <= v <= self.hi

    def issubset(self, other):
        return other.lo <= self.lo and self.hi <= other.hi


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; ``lo`` and ``hi`` are tuples of floats."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("box bounds differ in length")
        for a, b in zip(lo, hi):
            if not a <= b:
                raise ValueError(f"invalid box side [{a}, {b}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = [tuple(p) for p in pairs]
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def dim(self):
        return len(self.lo)

    @property
    def lo_array(self):
        return np.array(self.lo, dtype=float)

    @property
    def hi_array(self):
        return np.array(self.hi, dtype=float)

    @property
    def widths(self):
        return self.hi_array - self.lo_array

    @property
    def center(self):
        return 0.5 * (self.lo_array + self.hi_array)

    def intervals(self):
        return [Interval(a, b) for a, b in zip(self.lo, self.hi)]

    def pairs(self):
        return [[a, b] for a, b in zip(self.lo, self.hi)]

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(self.lo_array <= x) and np.all(x <= self.hi_array))

    def issubset(self, other):
        return all(o_lo <= a and b <= o_hi
                   for a, b, o_lo, o_hi in zip(self.lo, self.hi, other.lo, other.hi))


def _box_arrays(box, dim):
    if box is None:
        if dim:
            raise ValueError("missing box for nonzero dimension")
        return np.zeros((1, 0)), np.zeros((1, 0))
    if box.dim != dim:
        raise ValueError(f"box has dimension {box.dim}, expected {dim}")
    return box.lo_array[None, :], box.hi_array[None, :]


# --------------------------------------------------------------------------
# Nodes
# --------------------------------------------------------------------------

class Expr:
    """Base class of expression nodes."""

    __slots__ = ()

    def __str__(self):
        return unparse(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    kind: str  # 'x' state, 'u' input, 'w' noise
    index: int  # 0-based


def StateVar(i):
    return Var("x", i)


def InputVar(i):
    return Var("u", i)


def NoiseVar(i):
    return Var("w", i)


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Min(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Max(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class PowInt(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Func(Expr):
    name: str  # one of UNARY_FUNCS
    arg: Expr


_BINARY = {"+": Add, "-": Sub, "*": Mul, "/": Div}
_BINARY_SYMBOL = {Add: "+", Sub: "-", Mul: "*", Div: "/"}


def children(e):
    if isinstance(e, (Add, Sub, Mul, Div, Min, Max)):
        return (e.left, e.right)
    if isinstance(e, Neg):
        return (e.arg,)
    if isinstance(e, PowInt):
        return (e.base,)
    if isinstance(e, Func):
        return (e.arg,)
    return ()


def variables(e):
    """Set of ``(kind, index)`` pairs occurring in ``e``."""
    out = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add((node.kind, node.index))
        stack.extend(children(node))
    return out


def validate(e, dims):
    """Check every variable index of ``e`` against ``dims = (n_x, n_u, n_w)``."""
    limits = dict(zip(VAR_KINDS, dims))
    for kind, index in sorted(variables(e)):
        if not 0 <= index < limits[kind]:
            raise IndexOutOfRange(
                f"{kind}{index + 1} out of range: {limits[kind]} {kind}-variable(s) declared")
    return e


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_IDENT = re.compile(r"([xuw])(\d+)$")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(bad, f"unexpected character {text[bad]!r}")
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, dims):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.limits = dict(zip(VAR_KINDS, dims))

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(pos, f"expected {value!r}, found {found}")

    def parse(self):
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(pos, f"unexpected {text!r}")
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = _BINARY[op](e, self.term())
        return e

    def term(self):
        e = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = _BINARY[op](e, self.factor())
        return e

    def factor(self):
        negate = False
        if self.peek()[:2] == ("op", "-"):
            self.take()
            negate = True
        e = self.atom()
        if negate:
            e = Const(-e.value) if isinstance(e, Const) else Neg(e)
        if self.peek()[:2] == ("op", "^"):
            self.take()
            kind, text, pos = self.take()
            if kind != "num" or not text.isdigit():
                raise ExprSyntaxError(pos, "exponent must be a nonnegative integer literal")
            e = PowInt(e, int(text))
        return e

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            value = float(text)
            if not math.isfinite(value):
                raise ExprSyntaxError(pos, f"number {text} is not finite")
            return Const(value)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "ident":
            if text in UNARY_FUNCS or text in BINARY_FUNCS:
                return self.call(text, pos)
            m = _IDENT.match(text)
            if m is None:
                raise UnknownIdentifier(f"unknown identifier {text!r} at column {pos + 1}")
            var_kind, number = m.group(1), int(m.group(2))
            limit = self.limits[var_kind]
            if not 1 <= number <= limit:
                raise IndexOutOfRange(
                    f"{text} at column {pos + 1} out of range: "
                    f"{limit} {var_kind}-variable(s) declared")
            if self.peek()[:2] == ("op", "("):
                raise UnknownIdentifier(f"{text!r} at column {pos + 1} is not a function")
            return Var(var_kind, number - 1)
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(pos, f"expected operand, found {found}")

    def call(self, name, pos):
        if self.peek()[:2] != ("op", "("):
            raise ExprSyntaxError(pos, f"function {name} requires parentheses")
        self.take()
        first = self.expr()
        if name in BINARY_FUNCS:
            self.expect(",")
            second = self.expr()
            self.expect(")")
            return (Min if name == "min" else Max)(first, second)
        self.expect(")")
        return Func(name, first)


def parse_expr(text: str, dims: Sequence[int]) -> Expr:
    """Parse ``text`` into a validated expression.

    ``dims`` is ``(n_state, n_input, n_noise)``.
    """
    if any(d < 0 for d in dims):
        raise ValueError("dimensions must be nonnegative")
    return _Parser(text, tuple(dims)).parse()


def _format_number(v):
    text = repr(float(v))
    return f"({text})" if v < 0 or text.startswith("-") else text


def unparse(e: Expr) -> str:
    """Render ``e`` in the grammar accepted by :func:`parse_expr`."""
    if isinstance(e, Const):
        return _format_number(e.value)
    if isinstance(e, Var):
        return f"{e.kind}{e.index + 1}"
    if isinstance(e, Func):
        return f"{e.name}({unparse(e.arg)})"
    if isinstance(e, (Min, Max)):
        name = "min" if isinstance(e, Min) else "max"
        return f"{name}({unparse(e.left)}, {unparse(e.right)})"
    if isinstance(e, Neg):
        return f"-{_wrap(e.arg)}"
    if isinstance(e, PowInt):
        return f"{_wrap(e.base)}^{e.exponent}"
    symbol = _BINARY_SYMBOL[type(e)]
    return f"{_wrap(e.left)} {symbol} {_wrap(e.right)}"


def _wrap(e):
    text = unparse(e)
    # negative literals come back parenthesized from _format_number
    if isinstance(e, (Const, Var, Func, Min, Max)):
        return text
    return f"({text})"


# --------------------------------------------------------------------------
# Point evaluation
# --------------------------------------------------------------------------

def _point(e, env):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return env[e.kind][:, e.index]
    if isinstance(e, Add):
        return _point(e.left, env) + _point(e.right, env)
    if isinstance(e, Sub):
        return _point(e.left, env) - _point(e.right, env)
    if isinstance(e, Mul):
        return _point(e.left, env) * _point(e.right, env)
    if isinstance(e, Div):
        num = _point(e.left, env)
        den = _point(e.right, env)
        if np.any(np.abs(den) < DIV_GUARD):
            raise DivisionNearZero(f"denominator of {unparse(e)} is within {DIV_GUARD} of 0")
        return num / den
    if isinstance(e, Neg):
        return -_point(e.arg, env)
    if isinstance(e, PowInt):
        return np.power(_point(e.base, env), e.exponent)
    if isinstance(e, Min):
        return np.minimum(_point(e.left, env), _point(e.right, env))
    if isinstance(e, Max):
        return np.maximum(_point(e.left, env), _point(e.right, env))
    if isinstance(e, Func):
        a = _point(e.arg, env)
        return {"exp": np.exp, "sin": np.sin, "cos": np.cos,
                "tanh": np.tanh, "abs": np.abs}[e.name](a)
    raise TypeError(f"not an expression node: {e!r}")


def evaluate_batch(e, X, U=None, W=None):
    """Evaluate ``e`` at N points; ``X`` is (N, n_x), ``U``/``W`` (N, ·) or a
    single row broadcast to all points. Returns an (N,) array."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = X.shape[0]
    env = {"x": X, "u": _rows(U, N), "w": _rows(W, N)}
    with np.errstate(all="ignore"):
        out = np.broadcast_to(np.asarray(_point(e, env), dtype=float), (N,)).copy()
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult(f"{unparse(e)} evaluated to a non-finite value")
    return out


def _rows(A, N):
    if A is None:
        return np.zeros((N, 0))
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = np.broadcast_to(A, (N, A.shape[0]))
    return A


def evaluate(e: Expr, x, u=(), w=()) -> float:
    """Evaluate ``e`` at a single point in double precision."""
    x = np.asarray(x, dtype=float)[None, :]
    u = np.asarray(u, dtype=float).reshape(1, -1)
    w = np.asarray(w, dtype=float).reshape(1, -1)
    return float(evaluate_batch(e, x, u, w)[0])


# --------------------------------------------------------------------------
# Interval evaluation
# --------------------------------------------------------------------------

_TWO_PI = 2.0 * math.pi


def _contains_phase(lo, hi, phase):
    """True where some ``phase + 2*pi*k`` may lie in ``[lo, hi]``.

    Tolerances only ever enlarge the answer, which keeps callers sound.
    """
    tol = 1e-9 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    k = np.ceil((lo - tol - phase) / _TWO_PI)
    return (phase + _TWO_PI * k <= hi + tol) | (hi - lo >= _TWO_PI)


def _iv_trig(lo, hi, fn, max_phase, min_phase):
    a, b = fn(lo), fn(hi)
    rlo = kernels.down(np.minimum(a, b))
    rhi = kernels.up(np.maximum(a, b))
    rhi = np.where(_contains_phase(lo, hi, max_phase), 1.0, rhi)
    rlo = np.where(_contains_phase(lo, hi, min_phase), -1.0, rlo)
    return np.clip(rlo, -1.0, 1.0), np.clip(rhi, -1.0, 1.0)


def iv_powint(lo, hi, p):
    if p == 0:
        return np.ones_like(lo), np.ones_like(hi)
    if p == 1:
        return lo, hi
    plo, phi = np.power(lo, p), np.power(hi, p)
    if p % 2:
        return kernels.down(plo), kernels.up(phi)
    out_lo = np.where(lo >= 0, plo, np.where(hi <= 0, phi, 0.0))
    out_hi = np.where(lo >= 0, phi, np.where(hi <= 0, plo, np.power(np.maximum(-lo, hi), p)))
    return np.maximum(kernels.down(out_lo), 0.0), kernels.up(out_hi)


def iv_add(a, b):
    return kernels.down(a[0] + b[0]), kernels.up(a[1] + b[1])


def iv_sub(a, b):
    return kernels.down(a[0] - b[1]), kernels.up(a[1] - b[0])


def iv_scale(c, a):
    if c >= 0:
        return kernels.down(c * a[0]), kernels.up(c * a[1])
    return kernels.down(c * a[1]), kernels.up(c * a[0])


class _IntervalEvaluator:
    def __init__(self, env, K):
        self.env = env
        self.K = K
        self.div_zero = np.zeros(K, dtype=bool)

    def run(self, e):
        if isinstance(e, Const):
            v = np.full(self.K, e.value)
            return v, v
        if isinstance(e, Var):
            lo, hi = self.env[e.kind]
            return lo[:, e.index], hi[:, e.index]
        if isinstance(e, Add):
            return iv_add(self.run(e.left), self.run(e.right))
        if isinstance(e, Sub):
            return iv_sub(self.run(e.left), self.run(e.right))
        if isinstance(e, Mul):
            a = self.run(e.left)
            if e.left == e.right:  # same subexpression: use the even-power rule
                return iv_powint(a[0], a[1], 2)
            b = self.run(e.right)
            return kernels.iv_mul(a[0], a[1], b[0], b[1])
        if isinstance(e, Div):
            a, (blo, bhi) = self.run(e.left), self.run(e.right)
            bad = ~((blo > 0) | (bhi < 0))
            self.div_zero |= bad
            with np.errstate(divide="ignore", invalid="ignore"):
                rlo = kernels.down(1.0 / np.where(bad, 1.0, bhi))
                rhi = kernels.up(1.0 / np.where(bad, 1.0, blo))
            lo, hi = kernels.iv_mul(a[0], a[1], rlo, rhi)
            return np.where(bad, np.nan, lo), np.where(bad, np.nan, hi)
        if isinstance(e, Neg):
            lo, hi = self.run(e.arg)
            return -hi, -lo
        if isinstance(e, PowInt):
            lo, hi = self.run(e.base)
            return iv_powint(lo, hi, e.exponent)
        if isinstance(e, Min):
            a, b = self.run(e.left), self.run(e.right)
            return np.minimum(a[0], b[0]), np.minimum(a[1], b[1])
        if isinstance(e, Max):
            a, b = self.run(e.left), self.run(e.right)
            return np.maximum(a[0], b[0]), np.maximum(a[1], b[1])
        if isinstance(e, Func):
            lo, hi = self.run(e.arg)
            if e.name == "exp":
                return np.maximum(kernels.down(np.exp(lo)), 0.0), kernels.up(np.exp(hi))
            if e.name == "tanh":
                return (np.clip(kernels.down(np.tanh(lo)), -1.0, 1.0),
                        np.clip(kernels.up(np.tanh(hi)), -1.0, 1.0))
            if e.name == "sin":
                return _iv_trig(lo, hi, np.sin, 0.5 * math.pi, -0.5 * math.pi)
            if e.name == "cos":
                return _iv_trig(lo, hi, np.cos, 0.0, math.pi)
            if e.name == "abs":
                out_lo = np.where(lo >= 0, lo, np.where(hi <= 0, -hi, 0.0))
                out_hi = np.maximum(np.abs(lo), np.abs(hi))
                return out_lo, out_hi
        raise TypeError(f"not an expression node: {e!r}")


def interval_eval_batch(e, xlo, xhi, ulo=None, uhi=None, wlo=None, whi=None):
    """Enclose ``e`` over K boxes at once.

    Bounds are (K, dim) arrays (a 1-D row broadcasts). Boxes on which the
    enclosure fails (division by an interval containing 0, overflow) get NaN
    bounds; callers treat NaN as "undecided".
    """
    xlo = np.atleast_2d(np.asarray(xlo, dtype=float))
    xhi = np.atleast_2d(np.asarray(xhi, dtype=float))
    K = xlo.shape[0]
    env = {
        "x": (xlo, xhi),
        "u": (_rows(ulo, K), _rows(uhi, K)),
        "w": (_rows(wlo, K), _rows(whi, K)),
    }
    ev = _IntervalEvaluator(env, K)
    with np.errstate(all="ignore"):
        lo, hi = ev.run(e)
        lo = np.broadcast_to(lo, (K,)).astype(float)
        hi = np.broadcast_to(hi, (K,)).astype(float)
    bad = ~(np.isfinite(lo) & np.isfinite(hi))
    lo = np.where(bad, np.nan, lo)
    hi = np.where(bad, np.nan, hi)
    return lo, hi, ev.div_zero


def interval_eval(e: Expr, bx: Box, bu: Box | None = None, bw: Box | None = None) -> Interval:
    """Outward-rounded enclosure of the range of ``e`` over the given boxes."""
    xlo, xhi = _box_arrays(bx, bx.dim)
    ulo, uhi = _box_arrays(bu, bu.dim if bu is not None else 0)
    wlo, whi = _box_arrays(bw, bw.dim if bw is not None else 0)
    lo, hi, div_zero = interval_eval_batch(e, xlo, xhi, ulo, uhi, wlo, whi)
    if div_zero[0]:
        raise IntervalDivisionByZero(f"denominator interval contains 0 in {unparse(e)}")
    if not (np.isfinite(lo[0]) and np.isfinite(hi[0])):
        raise NonFiniteBound(f"enclosure of {unparse(e)} is not finite")
    return Interval(float(lo[0]), float(hi[0]))


# --------------------------------------------------------------------------
# Differentiation
# --------------------------------------------------------------------------

ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(e, v):
    return isinstance(e, Const) and e.value == v


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def _neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    return Neg(a)


def differentiate(e: Expr, var: int, kind: str = "x") -> Expr:
    """Symbolic partial derivative of ``e`` with respect to ``kind``-variable ``var``.

    Subtrees that do not mention the variable differentiate to 0; ``abs``,
    ``min`` and ``max`` over the variable raise :class:`NonDifferentiableNode`.
    """
    target = (kind, var)

    def d(node):
        if target not in variables(node):
            return ZERO
        if isinstance(node, Var):
            return ONE
        if isinstance(node, Add):
            return _add(d(node.left), d(node.right))
        if isinstance(node, Sub):
            dl, dr = d(node.left), d(node.right)
            if _is_const(dr, 0.0):
                return dl
            if _is_const(dl, 0.0):
                return _neg(dr)
            return Sub(dl, dr)
        if isinstance(node, Mul):
            return _add(_mul(d(node.left), node.right), _mul(node.left, d(node.right)))
        if isinstance(node, Div):
            dl, dr = d(node.left), d(node.right)
            num_l = _mul(dl, node.right)
            num_r = _mul(node.left, dr)
            num = num_l if _is_const(num_r, 0.0) else (
                _neg(num_r) if _is_const(num_l, 0.0) else Sub(num_l, num_r))
            return Div(num, PowInt(node.right, 2))
        if isinstance(node, Neg):
            return _neg(d(node.arg))
        if isinstance(node, PowInt):
            p = node.exponent
            inner = d(node.base)
            if p == 0:
                return ZERO
            if p == 1:
                return inner
            power = node.base if p == 2 else PowInt(node.base, p - 1)
            outer = _mul(Const(float(p)), power)
            return _mul(outer, inner)
        if isinstance(node, Func):
            inner = d(node.arg)
            a = node.arg
            if node.name == "exp":
                return _mul(node, inner)
            if node.name == "sin":
                return _mul(Func("cos", a), inner)
            if node.name == "cos":
                return _mul(Neg(Func("sin", a)), inner)
            if node.name == "tanh":
                return _mul(Sub(ONE, PowInt(node, 2)), inner)
            raise NonDifferentiableNode(f"abs is not differentiable: {unparse(node)}")
        if isinstance(node, (Min, Max)):
            raise NonDifferentiableNode(f"min/max is not differentiable: {unparse(node)}")
        raise TypeError(f"not an expression node: {node!r}")

    return d(e)

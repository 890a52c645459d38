"""SMT-LIB 2 export of verification conditions and a small syntax checker.

The exported query asks for ``x`` in the VC region with ``violation(x) >= 0``,
so ``sat`` yields a counterexample and ``unsat`` proves the VC. Networks are
unrolled into one ``let`` per layer. In ``polynomial`` mode every term must be
polynomial (square activations, no clamp, polynomial dynamics and sets); in
``dreal`` mode ``tanh``/``sin``/``cos``/``exp`` are emitted as solver builtins
and piecewise nodes (relu, abs, min, max) as ``ite``.
"""
from __future__ import annotations

import re
from decimal import Decimal

import numpy as np

from . import expr as ex
from .errors import SmtSyntaxError, UnsupportedNode

MODES = ("polynomial", "dreal")


def real(v: float) -> str:
    """Exact SMT-LIB decimal for a double."""
    v = float(v)
    if not np.isfinite(v):
        raise UnsupportedNode(f"non-finite constant {v}")
    d = Decimal(v)
    text = format(d.copy_abs(), "f")  # abs() would round to 28 digits
    if "." not in text:
        text += ".0"
    return f"(- {text})" if d < 0 or (v == 0 and str(v).startswith("-")) else text


class _Writer:
    def __init__(self, mode):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.mode = mode
        self.counter = 0

    def fresh(self, stem):
        self.counter += 1
        return f"{stem}{self.counter}"

    def need_dreal(self, what):
        if self.mode != "dreal":
            raise UnsupportedNode(f"{what} is not polynomial; use mode 'dreal'")

    # expressions -----------------------------------------------------------
    def expr(self, e, xs, us=(), ws=()):
        """Translate ``e`` with state/input/noise variables bound to term strings."""
        if isinstance(e, ex.Const):
            return real(e.value)
        if isinstance(e, ex.Var):
            return {"x": xs, "u": us, "w": ws}[e.kind][e.index]
        rec = lambda a: self.expr(a, xs, us, ws)  # noqa: E731
        if isinstance(e, ex.Add):
            return f"(+ {rec(e.left)} {rec(e.right)})"
        if isinstance(e, ex.Sub):
            return f"(- {rec(e.left)} {rec(e.right)})"
        if isinstance(e, ex.Mul):
            return f"(* {rec(e.left)} {rec(e.right)})"
        if isinstance(e, ex.Div):
            self.need_dreal("division")
            return f"(/ {rec(e.left)} {rec(e.right)})"
        if isinstance(e, ex.Neg):
            return f"(- {rec(e.arg)})"
        if isinstance(e, ex.PowInt):
            if e.exponent == 0:
                return "1.0"
            b = rec(e.base)
            return b if e.exponent == 1 else "(* " + " ".join([b] * e.exponent) + ")"
        if isinstance(e, (ex.Min, ex.Max)):
            self.need_dreal(type(e).__name__.lower())
            a, b = rec(e.left), rec(e.right)
            op = "<=" if isinstance(e, ex.Min) else ">="
            return f"(ite ({op} {a} {b}) {a} {b})"
        if isinstance(e, ex.Func):
            self.need_dreal(e.name)
            a = rec(e.arg)
            if e.name == "abs":
                return f"(ite (>= {a} 0.0) {a} (- {a}))"
            return f"({e.name} {a})"
        raise UnsupportedNode(f"cannot export node {e!r}")

    # networks --------------------------------------------------------------
    def _affine(self, W, b, inputs):
        out = []
        for j in range(W.shape[0]):
            parts = [f"(* {real(W[j, k])} {inputs[k]})" for k in range(W.shape[1])]
            parts.append(real(b[j]))
            out.append("(+ " + " ".join(parts) + ")")
        return out

    def _act(self, name, a):
        if name == "square":
            return f"(* {a} {a})"
        if name == "tanh":
            self.need_dreal("tanh activation")
            return f"(tanh {a})"
        self.need_dreal("relu activation")
        return f"(ite (> {a} 0.0) {a} 0.0)"

    def _act_d1(self, name, a, z):
        if name == "square":
            return f"(* 2.0 {a})"
        if name == "tanh":
            return f"(- 1.0 (* {z} {z}))"
        raise UnsupportedNode("relu networks have no exportable gradient")

    def network(self, net, inputs, output=0, tangent=None):
        """Term for output ``output`` of the network at ``inputs`` (or, with a
        ``tangent`` direction, the directional derivative), built as nested lets."""
        p = self.fresh("n")
        L = len(net.weights)
        opens = []
        cur = list(inputs)
        tan = list(tangent) if tangent is not None else None
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            pre = self._affine(W, b, cur)
            a_names = [f"{p}_a{i}_{j}" for j in range(len(pre))]
            binds = [f"({nm} {t})" for nm, t in zip(a_names, pre)]
            if tan is not None:
                tpre = self._affine(W, np.zeros(W.shape[0]), tan)
                t_names = [f"{p}_s{i}_{j}" for j in range(len(tpre))]
                binds += [f"({nm} {t})" for nm, t in zip(t_names, tpre)]
            opens.append("(let (" + " ".join(binds) + ") ")
            if i == L - 1:
                cur = a_names
                tan = t_names if tan is not None else None
                break
            name = net.shape.hidden[i][1]
            z_names = [f"{p}_z{i}_{j}" for j in range(len(a_names))]
            binds = [f"({z} {self._act(name, a)})" for z, a in zip(z_names, a_names)]
            opens.append("(let (" + " ".join(binds) + ") ")
            if tan is not None:
                tz = [f"{p}_t{i}_{j}" for j in range(len(a_names))]
                binds = [f"({t} (* {self._act_d1(name, a, z)} {s}))"
                         for t, a, z, s in zip(tz, a_names, z_names, t_names)]
                opens.append("(let (" + " ".join(binds) + ") ")
                tan = tz
            cur = z_names
        if net.shape.clamp is not None:
            if tangent is not None:
                raise UnsupportedNode("directional derivative of a clamped network")
            self.need_dreal("controller clamp (tanh)")
            c, h = net.shape.clamp.center[output], 0.5 * net.shape.clamp.widths[output]
            body = f"(+ {real(c)} (* {real(h)} (tanh {cur[output]})))"
        else:
            body = tan[output] if tangent is not None else cur[output]
        return "".join(opens) + body + ")" * len(opens)

    def controls(self, ctrl, xs):
        if ctrl is None:
            return ()
        return tuple(self.network(ctrl, xs, j) for j in range(ctrl.shape.output_dim))

    # sets ------------------------------------------------------------------
    def in_set(self, s, xs):
        parts = []
        for i, (lo, hi) in enumerate(s.base.pairs()):
            parts.append(f"(<= {real(lo)} {xs[i]})")
            parts.append(f"(<= {xs[i]} {real(hi)})")
        for g in s.constraints:
            parts.append(f"(<= {self.expr(g, xs)} 0.0)")
        return "(and " + " ".join(parts) + ")"

    def not_strictly_in(self, s, ys):
        """``margin_S(y) >= 0``: y on the boundary of or outside S."""
        parts = []
        for i, (lo, hi) in enumerate(s.base.pairs()):
            parts.append(f"(>= (- {real(lo)} {ys[i]}) 0.0)")
            parts.append(f"(>= (- {ys[i]} {real(hi)}) 0.0)")
        for g in s.constraints:
            parts.append(f"(>= {self.expr(g, ys)} 0.0)")
        return "(or " + " ".join(parts) + ")"


def _next_state(w, system, xs, us, noise):
    ws = tuple(real(v) for v in noise) if noise is not None else ()
    return [w.expr(f, xs, us, ws) for f in system.dynamics]


def _violation_term(w, vc, xs):
    from .rules import CompositeFn, MembershipFn

    fn = vc.violation
    us = w.controls(vc.ctrl, xs)
    if isinstance(fn, MembershipFn):
        ynames = [f"y{i + 1}" for i in range(len(xs))]
        ys = _next_state(w, fn.system, xs, us, None)
        binds = " ".join(f"({nm} {t})" for nm, t in zip(ynames, ys))
        body = "(and " + " ".join(w.not_strictly_in(s, ynames) for s in fn.sets) + ")"
        return None, f"(let ({binds}) {body})"
    if not isinstance(fn, CompositeFn):
        raise UnsupportedNode(f"cannot export violation {fn!r}")
    parts = [real(fn.const)]
    for t in fn.terms:
        if t.kind == "cert":
            term = w.network(vc.cert, xs)
        elif t.kind == "cert_at":
            term = w.network(vc.cert, [real(v) for v in t.point])
        elif t.kind == "cert_next":
            term = w.network(vc.cert, _next_state(w, fn.system, xs, us, t.noise))
        elif t.kind == "lie":
            term = w.network(vc.cert, xs, tangent=_next_state(w, fn.system, xs, us, None))
        else:
            term = w.expr(t.expr, xs)
        parts.append(term if t.coef == 1.0 else f"(* {real(t.coef)} {term})")
    return "(+ " + " ".join(parts) + ")", None


def export_smtlib(vc, mode: str = "polynomial") -> str:
    """SMT-LIB 2 query for ``exists x in region: violation(x) >= 0``."""
    w = _Writer(mode)
    n = vc.region.dim
    xs = [f"x{i + 1}" for i in range(n)]
    term, formula = _violation_term(w, vc, xs)
    lines = [f"; verification condition {vc.id}: sat means counterexample, unsat means it holds",
             "(set-logic QF_NRA)"]
    lines += [f"(declare-fun {x} () Real)" for x in xs]
    lines.append(f"(assert {w.in_set(vc.region, xs)})")
    for s in vc.exclude:
        lines.append(f"(assert (not {w.in_set(s, xs)}))")
    if vc.gate is not None:
        v = w.network(vc.cert, xs)
        g_lo, g_hi = vc.gate
        if np.isfinite(g_lo):
            lines.append(f"(assert (<= {real(g_lo)} {v}))")
        if np.isfinite(g_hi):
            lines.append(f"(assert (<= {v} {real(g_hi)}))")
    if formula is not None:
        lines.append(f"(assert {formula})")
    else:
        lines.append(f"(assert (>= {term} 0.0))")
    lines += ["(check-sat)", "(get-model)", "(exit)"]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Syntax checking
# --------------------------------------------------------------------------

_TOKEN = re.compile(r"""\s*(?:(;[^\n]*)|(\()|(\))|("(?:[^"]|"")*")|([^\s()";]+))""")
_NUMERAL = re.compile(r"^(0|[1-9][0-9]*)(\.[0-9]+)?$")
_SYMBOL = re.compile(r"^[A-Za-z~!@$%^&*_\-+=<>.?/][A-Za-z0-9~!@$%^&*_\-+=<>.?/]*$")
COMMANDS = {"set-logic", "set-option", "set-info", "declare-fun", "declare-const",
            "define-fun", "assert", "check-sat", "get-model", "get-value", "push",
            "pop", "exit"}
OPERATORS = {"+", "-", "*", "/", "<=", ">=", "<", ">", "=", "and", "or", "not",
             "ite", "=>", "tanh", "sin", "cos", "exp", "true", "false"}
SORTS = {"Real", "Int", "Bool"}


def _tokens(text):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise SmtSyntaxError(f"unexpected character at offset {pos}")
        pos = m.end()
        if m.group(1):
            continue
        tok = m.group(2) or m.group(3) or m.group(4) or m.group(5)
        if tok:
            out.append((tok, m.start(m.lastindex)))
    return out


def _parse_sexprs(text):
    stack = [[]]
    for tok, pos in _tokens(text):
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if len(stack) == 1:
                raise SmtSyntaxError(f"unbalanced ')' at offset {pos}")
            done = stack.pop()
            stack[-1].append(done)
        else:
            if not (_NUMERAL.match(tok) or _SYMBOL.match(tok) or tok.startswith(":")
                    or tok.startswith('"')):
                raise SmtSyntaxError(f"bad token {tok!r} at offset {pos}")
            stack[-1].append(tok)
    if len(stack) != 1:
        raise SmtSyntaxError("unbalanced '(' at end of input")
    return stack[0]


def _check_term(t, scope):
    if isinstance(t, str):
        if _NUMERAL.match(t):
            return
        if t in scope or t in ("true", "false"):
            return
        raise SmtSyntaxError(f"undeclared symbol {t!r}")
    if not t:
        raise SmtSyntaxError("empty application")
    head = t[0]
    if head == "let":
        if len(t) != 3 or not isinstance(t[1], list) or not t[1]:
            raise SmtSyntaxError("malformed let")
        inner = set(scope)
        for b in t[1]:
            if not (isinstance(b, list) and len(b) == 2 and isinstance(b[0], str)
                    and _SYMBOL.match(b[0])):
                raise SmtSyntaxError(f"malformed let binding {b!r}")
            _check_term(b[1], scope)  # parallel let: bindings see the outer scope
            inner.add(b[0])
        _check_term(t[2], inner)
        return
    if not isinstance(head, str) or (head not in OPERATORS and head not in scope):
        raise SmtSyntaxError(f"unknown function {head!r}")
    if len(t) < 2:
        raise SmtSyntaxError(f"{head} applied to no arguments")
    if head == "ite" and len(t) != 4:
        raise SmtSyntaxError("ite needs three arguments")
    if head == "not" and len(t) != 2:
        raise SmtSyntaxError("not needs one argument")
    for a in t[1:]:
        _check_term(a, scope)


def check_smtlib(text: str) -> int:
    """Check SMT-LIB 2 script syntax and symbol scoping; returns the command count.

    Covers the fragment this package emits: commands, declarations of
    nullary Real/Int/Bool constants, and terms built from arithmetic,
    comparisons, boolean connectives, ``ite``, ``let`` and transcendental
    builtins. Raises :class:`SmtSyntaxError` on the first problem.
    """
    scope = set()
    cmds = _parse_sexprs(text)
    for c in cmds:
        if not isinstance(c, list) or not c or c[0] not in COMMANDS:
            raise SmtSyntaxError(f"not a command: {c!r}")
        head = c[0]
        if head == "declare-fun":
            if len(c) != 4 or c[2] != [] or c[3] not in SORTS or not _SYMBOL.match(c[1]):
                raise SmtSyntaxError(f"malformed declare-fun {c!r}")
            scope.add(c[1])
        elif head == "declare-const":
            if len(c) != 3 or c[2] not in SORTS:
                raise SmtSyntaxError(f"malformed declare-const {c!r}")
            scope.add(c[1])
        elif head == "assert":
            if len(c) != 2:
                raise SmtSyntaxError("assert takes one term")
            _check_term(c[1], scope)
        elif head == "set-logic":
            if len(c) != 2 or not isinstance(c[1], str):
                raise SmtSyntaxError("malformed set-logic")
        elif head in ("check-sat", "get-model", "exit") and len(c) != 1:
            raise SmtSyntaxError(f"{head} takes no arguments")
    return len(cmds)

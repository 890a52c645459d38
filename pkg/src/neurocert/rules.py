"""Compile a problem plus candidate networks into verification conditions.

A verification condition (VC) states ``violation(x) < 0`` for every ``x`` in
its region. The region is a constrained set minus optional excluded sets,
optionally restricted by a gate ``gate_lo <= V(x) <= gate_hi`` on the
certificate value. Violations are built from a small vocabulary of terms
(certificate value, certificate after one step, Lie derivative, raw
expressions) with point, interval and parameter-gradient semantics.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from . import kernels
from . import net as nn
from .errors import MalformedProblem, PointOutsideRegion, ReluNotSupported
from .expr import Box
from .model import (
    ConstrainedSet,
    Invariance,
    ProbabilisticReachability,
    ProbabilisticSafety,
    Problem,
    Reachability,
    ReachWhileAvoid,
    Safety,
    Stability,
    System,
    SystemKind,
    ball_set,
    check_spec_system,
)

VC_IDS = ("stab/pos", "stab/dec", "safe/init", "safe/unsafe", "safe/flow",
          "inv/pos", "inv/step", "inv/flow",
          "reach/nonneg", "reach/rank", "reach/dominv",
          "rwa/init", "rwa/avoid", "rwa/rank", "rwa/dominv",
          "psafe/nonneg", "psafe/level", "psafe/super",
          "preach/nonneg", "preach/edec")


@dataclass(frozen=True)
class Term:
    """One summand ``coef * t(x)`` of a composite violation.

    kinds: ``cert`` V(x); ``cert_at`` V(point); ``cert_next`` V(f(x, g(x), w));
    ``lie`` grad V(x) . f(x, g(x)); ``expr`` a raw expression of x.
    """

    kind: str
    coef: float = 1.0
    point: tuple | None = None
    noise: tuple | None = None
    expr: object = None


def _iv_scale(c, lo, hi):
    if c == 1.0:
        return lo, hi
    if c >= 0:
        return kernels.down(c * lo), kernels.up(c * hi)
    return kernels.down(c * hi), kernels.up(c * lo)


def _controls(ctrl, X):
    return None if ctrl is None else nn.forward(ctrl, X)


def _ctrl_interval(ctrl, lo, hi):
    if ctrl is None:
        return None, None
    return nn.interval_forward_batch(ctrl, lo, hi)


def _ctrl_vjp(system, ctrl, X, U, w, gY):
    """Pull an adjoint on the successor state back to controller parameters."""
    J = system.input_jacobian_values(X, U, w)
    gU = np.einsum("ni,nij->nj", gY, J)
    _, grads = nn.backward(ctrl, X, gU)
    return nn.flatten_grads(grads)


@dataclass(frozen=True)
class CompositeFn:
    """``const + sum(coef * term)`` over the closed-loop system."""

    system: System
    terms: tuple
    const: float = 0.0

    @property
    def uses_gradient(self):
        return any(t.kind == "lie" for t in self.terms)

    def evaluate(self, X, cert, ctrl=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(X.shape[0], float(self.const))
        U = None
        for t in self.terms:
            if t.kind == "cert":
                v = nn.forward(cert, X)[:, 0]
            elif t.kind == "cert_at":
                v = nn.forward(cert, np.array(t.point))[0]
            elif t.kind == "cert_next":
                U = _controls(ctrl, X) if U is None else U
                v = nn.forward(cert, self.system.field(X, U, t.noise))[:, 0]
            elif t.kind == "lie":
                U = _controls(ctrl, X) if U is None else U
                F = self.system.field(X, U)
                v = np.sum(nn.input_gradient(cert, X) * F, axis=1)
            elif t.kind == "expr":
                v = ex.evaluate_batch(t.expr, X)
            else:
                raise ValueError(f"unknown term kind {t.kind!r}")
            out = out + t.coef * v
        return out

    def interval(self, lo, hi, cert, ctrl=None):
        """Enclosures over K boxes; NaN marks boxes where enclosure failed."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        K = lo.shape[0]
        acc_lo = np.full(K, float(self.const))
        acc_hi = acc_lo.copy()
        ulo = uhi = None
        have_u = False
        with np.errstate(all="ignore"):
            for t in self.terms:
                if t.kind in ("cert_next", "lie") and not have_u:
                    ulo, uhi = _ctrl_interval(ctrl, lo, hi)
                    have_u = True
                if t.kind == "cert":
                    a, b = nn.interval_forward_batch(cert, lo, hi)
                    tlo, thi = a[:, 0], b[:, 0]
                elif t.kind == "cert_at":
                    p = np.array(t.point)[None, :]
                    a, b = nn.interval_forward_batch(cert, p, p)
                    tlo, thi = np.full(K, a[0, 0]), np.full(K, b[0, 0])
                elif t.kind == "cert_next":
                    ylo, yhi = self.system.field_interval(lo, hi, ulo, uhi, t.noise)
                    a, b = nn.interval_forward_batch(cert, ylo, yhi)
                    tlo, thi = a[:, 0], b[:, 0]
                elif t.kind == "lie":
                    flo, fhi = self.system.field_interval(lo, hi, ulo, uhi)
                    glo, ghi = nn.interval_input_gradient_batch(cert, lo, hi)
                    plo, phi = kernels.iv_mul(glo[:, 0, :], ghi[:, 0, :], flo, fhi)
                    tlo, thi = kernels.iv_sum_rows(plo, phi)
                else:
                    tlo, thi, _ = ex.interval_eval_batch(t.expr, lo, hi)
                tlo, thi = _iv_scale(t.coef, tlo, thi)
                acc_lo = kernels.down(acc_lo + tlo)
                acc_hi = kernels.up(acc_hi + thi)
        bad = ~(np.isfinite(acc_lo) & np.isfinite(acc_hi))
        return np.where(bad, np.nan, acc_lo), np.where(bad, np.nan, acc_hi)

    def vjp(self, X, cert, ctrl, upstream):
        """Parameter gradients of ``sum(upstream * evaluate(X))``.

        Returns flat gradient vectors ``(d_cert, d_ctrl)``; ``d_ctrl`` is None
        without a controller.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = np.asarray(upstream, dtype=float)
        g_cert = np.zeros(cert.shape.n_params)
        g_ctrl = None if ctrl is None else np.zeros(ctrl.shape.n_params)
        U = None
        for t in self.terms:
            ct = t.coef * c
            if t.kind == "cert":
                _, grads = nn.backward(cert, X, ct[:, None])
                g_cert += nn.flatten_grads(grads)
            elif t.kind == "cert_at":
                _, grads = nn.backward(cert, np.array(t.point), [ct.sum()])
                g_cert += nn.flatten_grads(grads)
            elif t.kind == "cert_next":
                U = _controls(ctrl, X) if U is None else U
                Y = self.system.field(X, U, t.noise)
                gY, grads = nn.backward(cert, Y, ct[:, None])
                g_cert += nn.flatten_grads(grads)
                if ctrl is not None:
                    g_ctrl += _ctrl_vjp(self.system, ctrl, X, U, t.noise, gY)
            elif t.kind == "lie":
                U = _controls(ctrl, X) if U is None else U
                F = self.system.field(X, U)
                grads, gF = nn.directional_backward(cert, X, F, ct)
                g_cert += nn.flatten_grads(grads)
                if ctrl is not None:
                    g_ctrl += _ctrl_vjp(self.system, ctrl, X, U, None, gF)
        return g_cert, g_ctrl


@dataclass(frozen=True)
class MembershipFn:
    """``min over sets S of margin_S(f(x, g(x)))``; negative iff the successor
    lies strictly inside one of the sets."""

    system: System
    sets: tuple

    uses_gradient = False

    def _margins(self, Y):
        return np.stack([s.margin(Y) for s in self.sets], axis=1)

    def evaluate(self, X, cert, ctrl=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = self.system.field(X, _controls(ctrl, X))
        return np.min(self._margins(Y), axis=1)

    def interval(self, lo, hi, cert, ctrl=None):
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        with np.errstate(all="ignore"):
            ulo, uhi = _ctrl_interval(ctrl, lo, hi)
            ylo, yhi = self.system.field_interval(lo, hi, ulo, uhi)
            out_lo = out_hi = None
            for s in self.sets:
                blo, bhi = s.base.lo_array, s.base.hi_array
                mlo = np.max(np.concatenate([kernels.down(blo - yhi), kernels.down(ylo - bhi)], axis=1), axis=1)
                mhi = np.max(np.concatenate([kernels.up(blo - ylo), kernels.up(yhi - bhi)], axis=1), axis=1)
                for g in s.constraints:
                    glo, ghi, _ = ex.interval_eval_batch(g, ylo, yhi)
                    mlo = np.maximum(mlo, glo)
                    mhi = np.maximum(mhi, ghi)
                out_lo = mlo if out_lo is None else np.minimum(out_lo, mlo)
                out_hi = mhi if out_hi is None else np.minimum(out_hi, mhi)
        bad = ~(np.isfinite(out_lo) & np.isfinite(out_hi))
        return np.where(bad, np.nan, out_lo), np.where(bad, np.nan, out_hi)

    def vjp(self, X, cert, ctrl, upstream):
        g_cert = np.zeros(cert.shape.n_params)
        if ctrl is None:
            return g_cert, None
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = nn.forward(ctrl, X)
        Y = self.system.field(X, U)
        n = Y.shape[1]
        M = self._margins(Y)
        best = np.argmin(M, axis=1)
        gY = np.zeros_like(Y)
        for k, s in enumerate(self.sets):
            rows = np.flatnonzero(best == k)
            if rows.size == 0:
                continue
            Yk = Y[rows]
            cands = [s.base.lo_array - Yk, Yk - s.base.hi_array]
            grads = [np.broadcast_to(-np.eye(n), (rows.size, n, n)),
                     np.broadcast_to(np.eye(n), (rows.size, n, n))]
            vals = np.concatenate(cands, axis=1)
            G = np.concatenate(grads, axis=1)
            for g, dg in zip(s.constraints, s.constraint_gradients):
                v = ex.evaluate_batch(g, Yk)[:, None]
                if dg is None:
                    d = np.zeros((rows.size, 1, n))
                else:
                    d = np.stack([ex.evaluate_batch(e, Yk) for e in dg], axis=1)[:, None, :]
                vals = np.concatenate([vals, v], axis=1)
                G = np.concatenate([G, d], axis=1)
            j = np.argmax(vals, axis=1)
            gY[rows] = G[np.arange(rows.size), j]
        gY *= np.asarray(upstream, dtype=float)[:, None]
        return g_cert, _ctrl_vjp(self.system, ctrl, X, U, None, gY)


@dataclass(frozen=True)
class VC:
    """``violation(x) < 0`` for every x in ``region`` outside every ``exclude``
    set with ``gate[0] <= V(x) <= gate[1]``."""

    id: str
    region: ConstrainedSet
    violation: object
    cert: nn.Network
    ctrl: nn.Network | None = None
    exclude: tuple = ()
    gate: tuple | None = None
    train_margin: float | None = None  # None: use the training config's margin

    def with_nets(self, cert, ctrl=None):
        return dataclasses.replace(self, cert=cert, ctrl=ctrl)

    def region_members(self, X):
        """Region membership ignoring the gate."""
        mask = self.region.members(X)
        for s in self.exclude:
            if mask.any():
                mask &= ~s.members(X)
        return mask

    def gate_mask(self, X, cert=None):
        X = np.atleast_2d(X)
        if self.gate is None:
            return np.ones(X.shape[0], dtype=bool)
        v = nn.forward(cert or self.cert, X)[:, 0]
        return (v >= self.gate[0]) & (v <= self.gate[1])

    def members(self, X, cert=None):
        mask = self.region_members(X)
        if self.gate is not None and mask.any():
            mask &= self.gate_mask(X, cert)
        return mask

    def evaluate(self, X):
        return self.violation.evaluate(X, self.cert, self.ctrl)

    def interval(self, lo, hi):
        return self.violation.interval(lo, hi, self.cert, self.ctrl)


def vc_violation(vc: VC, x) -> float:
    """Violation at one point of the region (gate not checked)."""
    x = np.asarray(x, dtype=float)
    if not vc.region_members(x[None, :])[0]:
        raise PointOutsideRegion(f"point {x.tolist()} is outside the region of {vc.id}")
    return float(vc.evaluate(x[None, :])[0])


def vc_interval(vc: VC, b: Box):
    """Outward enclosure ``(lo, hi)`` of the violation over the box."""
    lo, hi = vc.interval(b.lo_array[None, :], b.hi_array[None, :])
    return float(lo[0]), float(hi[0])


# --------------------------------------------------------------------------
# Rule compilation
# --------------------------------------------------------------------------

def _expectation(system, coef=1.0):
    return tuple(Term("cert_next", coef * float(p), noise=tuple(w)) for w, p in system.noise)


def compile_rules(problem: Problem, cert: nn.Network, ctrl: nn.Network | None = None,
                  train_margin: float | None = None) -> list:
    """Emit the VCs whose joint validity proves the problem's property."""
    sysm, spec, D = problem.system, problem.spec, problem.domain
    check_spec_system(spec, sysm)
    n = sysm.n_state
    if cert.shape.input_dim != n or cert.shape.output_dim != 1 or cert.shape.clamp is not None:
        raise MalformedProblem(
            f"certificate must map {n} inputs to one unclamped output, got {cert.shape}")
    if sysm.n_input > 0:
        if ctrl is None:
            raise MalformedProblem("system has inputs but no controller was given")
        if ctrl.shape.input_dim != n or ctrl.shape.output_dim != sysm.n_input:
            raise MalformedProblem(f"controller must map {n} inputs to {sysm.n_input} outputs")
    elif ctrl is not None:
        raise MalformedProblem("controller given but the system has no inputs")

    rp = problem.rule_params
    mu_pos, mu_dec, band = problem.mu_pos, rp.mu_dec, rp.band
    cont = sysm.kind is SystemKind.CONTINUOUS
    if cont and cert.shape.uses_relu:
        raise ReluNotSupported("continuous-time rules need a differentiable certificate")

    def fn(terms, const=0.0):
        return CompositeFn(sysm, tuple(terms), float(const))

    def vc(vid, region, violation, exclude=(), gate=None):
        return VC(vid, region, violation, cert, ctrl, tuple(exclude), gate, train_margin)

    V = Term("cert")
    mV = Term("cert", -1.0)
    step = Term("cert_next")
    out = []
    if isinstance(spec, Stability):
        ball = ball_set(spec.equilibrium, spec.radius)
        at_eq = Term("cert_at", 1.0, point=tuple(spec.equilibrium))
        out.append(vc("stab/pos", D, fn([mV, at_eq], mu_pos), [ball]))
        dec = [Term("lie")] if cont else [step, mV]
        out.append(vc("stab/dec", D, fn(dec, mu_dec), [ball]))
    elif isinstance(spec, Safety):
        out.append(vc("safe/init", spec.init, fn([V], mu_pos)))
        out.append(vc("safe/unsafe", spec.unsafe, fn([mV], mu_pos)))
        if cont:
            out.append(vc("safe/flow", D, fn([Term("lie")], mu_dec), gate=(-band, band)))
        else:
            out.append(vc("safe/flow", D, fn([step]), gate=(-np.inf, 0.0)))
    elif isinstance(spec, Invariance):
        out.append(vc("inv/pos", spec.inv, fn([V], mu_pos)))
        if cont:
            out.append(vc("inv/flow", D, fn([Term("lie")], mu_dec), gate=(-band, band)))
        else:
            out.append(vc("inv/step", spec.inv, fn([step])))
    elif isinstance(spec, Reachability):
        T = spec.target
        out.append(vc("reach/nonneg", D, fn([mV]), [T]))
        out.append(vc("reach/rank", D, fn([step, mV], spec.decrease), [T]))
        if rp.check_domain_invariance:
            out.append(vc("reach/dominv", D, MembershipFn(sysm, (D, T)), [T]))
    elif isinstance(spec, ReachWhileAvoid):
        T, A = spec.target, spec.avoid
        out.append(vc("rwa/init", spec.init, fn([V])))
        out.append(vc("rwa/avoid", A, fn([mV], mu_pos)))
        out.append(vc("rwa/rank", D, fn([step, mV], spec.decrease), [T, A], gate=(-np.inf, 0.0)))
        if rp.check_domain_invariance:
            out.append(vc("rwa/dominv", D, MembershipFn(sysm, (D, T)), [T, A], gate=(-np.inf, 0.0)))
    elif isinstance(spec, ProbabilisticReachability):
        T = spec.target
        out.append(vc("preach/nonneg", D, fn([mV]), [T]))
        out.append(vc("preach/edec", D, fn([*_expectation(sysm), mV], spec.decrease), [T]))
    elif isinstance(spec, ProbabilisticSafety):
        U = spec.unsafe
        out.append(vc("psafe/nonneg", D, fn([mV])))
        out.append(vc("psafe/level", U, fn([mV], spec.level)))
        out.append(vc("psafe/super", D, fn([*_expectation(sysm), mV], -rp.psafe_slack), [U]))
    else:
        raise MalformedProblem(f"unsupported specification {spec!r}")
    return out


def expr_vc(vid: str, region: ConstrainedSet, e, exclude=(), train_margin=0.0) -> VC:
    """A VC whose violation is a plain expression of the state (no networks)."""
    n = region.dim
    dummy = nn.Network(nn.NetworkShape(n, (), 1), [np.zeros((1, n))], [np.zeros(1)])
    system = System(SystemKind.DISCRETE, n, 0, tuple(ex.StateVar(i) for i in range(n)))
    return VC(vid, region, CompositeFn(system, (Term("expr", 1.0, expr=e),)), dummy, None,
              tuple(exclude), None, train_margin)

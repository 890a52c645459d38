"""Dynamical systems, constrained sets, property specifications and problems."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Mapping

import numpy as np

from . import expr as ex
from .errors import (
    EmptySetSuspected,
    ExprError,
    MalformedProblem,
    NonFiniteResult,
    SpecSystemMismatch,
)
from .expr import Box, Expr

MAX_CONSECUTIVE_REJECTIONS = 10**6


class SystemKind(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class System:
    kind: SystemKind
    n_state: int
    n_input: int
    dynamics: tuple
    noise: tuple = ()  # ((w_vector, probability), ...)
    input_box: Box | None = None

    @property
    def n_noise(self):
        return len(self.noise[0][0]) if self.noise else 0

    @cached_property
    def noise_points(self):
        return np.array([w for w, _ in self.noise], dtype=float).reshape(len(self.noise), self.n_noise)

    @cached_property
    def noise_probs(self):
        return np.array([p for _, p in self.noise], dtype=float)

    @cached_property
    def input_jacobian(self):
        """``[[d f_i / d u_j]]`` as expressions (None where not differentiable)."""
        rows = []
        for f in self.dynamics:
            row = []
            for j in range(self.n_input):
                try:
                    row.append(ex.differentiate(f, j, kind="u"))
                except ExprError:
                    row.append(None)
            rows.append(row)
        return rows

    def field(self, X, U=None, w=None):
        """Evaluate all dynamics components at N points; returns (N, n_state)."""
        X = np.atleast_2d(X)
        return np.stack([ex.evaluate_batch(f, X, U, w) for f in self.dynamics], axis=1)

    def input_jacobian_values(self, X, U, w=None):
        """(N, n_state, n_input) values of the input Jacobian (0 where unavailable)."""
        N = X.shape[0]
        J = np.zeros((N, self.n_state, self.n_input))
        for i, row in enumerate(self.input_jacobian):
            for j, d in enumerate(row):
                if d is not None:
                    J[:, i, j] = ex.evaluate_batch(d, X, U, w)
        return J

    def field_interval(self, xlo, xhi, ulo=None, uhi=None, w=None):
        """Enclosures of all dynamics components over K boxes; (K, n_state) arrays."""
        los, his = [], []
        for f in self.dynamics:
            lo, hi, _ = ex.interval_eval_batch(f, xlo, xhi, ulo, uhi, w, w)
            los.append(lo)
            his.append(hi)
        return np.stack(los, axis=1), np.stack(his, axis=1)


@dataclass(frozen=True)
class ConstrainedSet:
    """``{x in base : g_i(x) <= 0 for all i}``."""

    base: Box
    constraints: tuple = ()

    @property
    def dim(self):
        return self.base.dim

    @cached_property
    def constraint_gradients(self):
        grads = []
        for g in self.constraints:
            try:
                grads.append([ex.differentiate(g, i) for i in range(self.dim)])
            except ExprError:
                grads.append(None)
        return grads

    def members(self, X):
        """Boolean mask of rows of ``X`` that belong to the set."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mask = np.all((X >= self.base.lo_array) & (X <= self.base.hi_array), axis=1)
        for g in self.constraints:
            if not mask.any():
                break
            vals = ex.evaluate_batch(g, X)
            mask &= vals <= 0
        return mask

    def margin(self, Y):
        """Largest constraint value at each row (<= 0 iff member), base box included."""
        Y = np.atleast_2d(Y)
        terms = [self.base.lo_array - Y, Y - self.base.hi_array]
        out = np.max(np.concatenate(terms, axis=1), axis=1)
        for g in self.constraints:
            out = np.maximum(out, ex.evaluate_batch(g, Y))
        return out


def set_membership(s: ConstrainedSet, x) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (s.dim,):
        raise ValueError(f"point has shape {x.shape}, expected ({s.dim},)")
    return bool(s.members(x[None, :])[0])


INSIDE, OUTSIDE, UNDECIDED = "Inside", "Outside", "Undecided"


def classify_boxes(s: ConstrainedSet, lo, hi):
    """Vectorized :func:`classify_box` over K boxes; returns two boolean masks
    ``(inside, outside)``."""
    blo, bhi = s.base.lo_array, s.base.hi_array
    inside = np.all((lo >= blo) & (hi <= bhi), axis=1)
    outside = np.any((hi < blo) | (lo > bhi), axis=1)
    for g in s.constraints:
        glo, ghi, _ = ex.interval_eval_batch(g, lo, hi)
        inside &= ghi <= 0
        outside |= glo > 0
    return inside & ~outside, outside


def classify_box(s: ConstrainedSet, b: Box) -> str:
    inside, outside = classify_boxes(s, b.lo_array[None, :], b.hi_array[None, :])
    if outside[0]:
        return OUTSIDE
    if inside[0]:
        return INSIDE
    return UNDECIDED


def sample_set(s: ConstrainedSet, count: int, rng: np.random.Generator,
               exclude=()) -> np.ndarray:
    """Rejection-sample ``count`` points uniformly from the set (minus ``exclude``)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = s.base.lo_array, s.base.hi_array
    accepted = []
    n_acc = 0
    rejections = 0
    batch = max(2 * count, 256)
    while n_acc < count:
        X = lo + (hi - lo) * rng.random((batch, s.dim))
        mask = s.members(X)
        for other in exclude:
            mask &= ~other.members(X)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            rejections += batch
        else:
            rejections = batch - 1 - idx[-1]
            take = X[idx[: count - n_acc]]
            accepted.append(take)
            n_acc += take.shape[0]
        if rejections >= MAX_CONSECUTIVE_REJECTIONS:
            raise EmptySetSuspected(f"{rejections} consecutive rejections while sampling")
    return np.concatenate(accepted, axis=0)


def ball_set(center, radius, constraints_only=False) -> ConstrainedSet:
    """Closed Euclidean ball as a constrained set."""
    center = [float(c) for c in center]
    terms = None
    for i, c in enumerate(center):
        d = ex.Sub(ex.StateVar(i), ex.Const(c)) if c != 0 else ex.StateVar(i)
        t = ex.PowInt(d, 2)
        terms = t if terms is None else ex.Add(terms, t)
    g = ex.Sub(terms, ex.Const(radius * radius))
    base = Box(tuple(c - radius for c in center), tuple(c + radius for c in center))
    return ConstrainedSet(base, (g,))


# --------------------------------------------------------------------------
# Specifications
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Stability:
    equilibrium: tuple
    radius: float
    kind = "stability"


@dataclass(frozen=True)
class Safety:
    init: ConstrainedSet
    unsafe: ConstrainedSet
    kind = "safety"


@dataclass(frozen=True)
class Invariance:
    inv: ConstrainedSet
    kind = "invariance"


@dataclass(frozen=True)
class Reachability:
    target: ConstrainedSet
    decrease: float
    kind = "reachability"


@dataclass(frozen=True)
class ReachWhileAvoid:
    init: ConstrainedSet
    target: ConstrainedSet
    avoid: ConstrainedSet
    decrease: float
    kind = "reach_avoid"


@dataclass(frozen=True)
class ProbabilisticSafety:
    init: ConstrainedSet
    unsafe: ConstrainedSet
    level: float
    kind = "probabilistic_safety"


@dataclass(frozen=True)
class ProbabilisticReachability:
    target: ConstrainedSet
    decrease: float
    kind = "probabilistic_reachability"


SPEC_TYPES = {cls.kind: cls for cls in (
    Stability, Safety, Invariance, Reachability, ReachWhileAvoid,
    ProbabilisticSafety, ProbabilisticReachability)}

_SET_FIELDS = {
    "safety": ("init", "unsafe"),
    "invariance": ("inv",),
    "reachability": ("target",),
    "reach_avoid": ("init", "target", "avoid"),
    "probabilistic_safety": ("init", "unsafe"),
    "probabilistic_reachability": ("target",),
    "stability": (),
}
_SCALAR_FIELDS = {
    "stability": ("radius",),
    "reachability": ("decrease",),
    "reach_avoid": ("decrease",),
    "probabilistic_safety": ("level",),
    "probabilistic_reachability": ("decrease",),
    "safety": (),
    "invariance": (),
}

SUPPORTED_SPECS = {
    SystemKind.CONTINUOUS: ("stability", "safety", "invariance"),
    SystemKind.DISCRETE: ("stability", "safety", "invariance", "reachability", "reach_avoid"),
    SystemKind.STOCHASTIC: ("probabilistic_safety", "probabilistic_reachability"),
}

_GUIDANCE = {
    ("safety", SystemKind.STOCHASTIC): "use probabilistic_safety with a level for stochastic systems",
    ("reachability", SystemKind.STOCHASTIC): "use probabilistic_reachability for stochastic systems",
}


def check_spec_system(spec, system):
    """Raise :class:`SpecSystemMismatch` if ``spec`` cannot be certified on ``system``."""
    if spec.kind not in SUPPORTED_SPECS[system.kind]:
        hint = _GUIDANCE.get((spec.kind, system.kind))
        msg = f"{spec.kind} is not supported for {system.kind.value} systems"
        if hint:
            msg += f"; {hint}"
        raise SpecSystemMismatch(msg)


# --------------------------------------------------------------------------
# Problems
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleParams:
    """Margins used when compiling proof rules.

    ``mu_pos=None`` means ``1e-4`` times the largest domain half-width.
    ``psafe_slack``/``psafe_horizon`` select the finite-horizon variant of the
    probabilistic safety rule (slack 0 is the infinite-horizon rule).
    """

    mu_pos: float | None = None
    mu_dec: float = 1e-4
    band: float = 0.1
    check_domain_invariance: bool = True
    psafe_slack: float = 0.0
    psafe_horizon: int = 0


@dataclass(frozen=True)
class Problem:
    system: System
    domain: ConstrainedSet
    spec: object
    certificate_shape: object  # net.NetworkShape
    controller_shape: object = None
    rule_params: RuleParams = field(default_factory=RuleParams)
    seed: int = 0

    @property
    def domain_scale(self):
        return float(np.max(self.domain.base.widths)) / 2.0

    @property
    def mu_pos(self):
        if self.rule_params.mu_pos is not None:
            return self.rule_params.mu_pos
        return 1e-4 * max(self.domain_scale, 1e-12)


_SYSTEM_KEYS = {"kind", "n_state", "n_input", "dynamics", "noise", "input_box"}
_SET_KEYS = {"box", "constraints"}
_NET_KEYS = {"hidden"}
_RULE_KEYS = {"mu_pos", "mu_dec", "band", "check_domain_invariance",
              "psafe_slack", "psafe_horizon"}
TOP_LEVEL_KEYS = {"system", "domain", "spec", "certificate", "controller",
                  "rules", "train", "verify", "cegis", "seed"}


class _Diagnostics:
    def __init__(self):
        self.items = []

    def add(self, path, msg):
        self.items.append((path, msg))

    def unknown(self, mapping, allowed, path):
        for key in mapping:
            if key not in allowed:
                self.add(f"{path}.{key}" if path else key, f"unknown key {key!r}")


def _as_float(value, path, diag, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        diag.add(path, f"expected a number, got {value!r}")
        return None
    value = float(value)
    if not math.isfinite(value):
        diag.add(path, "must be finite")
        return None
    if positive and value <= 0:
        diag.add(path, f"must be > 0, got {value}")
        return None
    return value


def _as_int(value, path, diag, minimum=0):
    if isinstance(value, bool) or not isinstance(value, int):
        diag.add(path, f"expected an integer, got {value!r}")
        return None
    if value < minimum:
        diag.add(path, f"must be >= {minimum}, got {value}")
        return None
    return value


def _parse_box(raw, dim, path, diag):
    if not isinstance(raw, (list, tuple)) or any(
            not isinstance(p, (list, tuple)) or len(p) != 2 for p in raw):
        diag.add(path, "expected a list of [lo, hi] pairs")
        return None
    if dim is not None and len(raw) != dim:
        diag.add(path, f"box has {len(raw)} sides, expected {dim}")
        return None
    pairs = []
    for i, (a, b) in enumerate(raw):
        a = _as_float(a, f"{path}[{i}][0]", diag)
        b = _as_float(b, f"{path}[{i}][1]", diag)
        if a is None or b is None:
            return None
        if a > b:
            diag.add(f"{path}[{i}]", f"lower bound {a} exceeds upper bound {b}")
            return None
        pairs.append((a, b))
    return Box.from_pairs(pairs)


def _parse_exprs(raw, dims, path, diag):
    if not isinstance(raw, (list, tuple)) or not all(isinstance(t, str) for t in raw):
        diag.add(path, "expected a list of expression strings")
        return None
    out = []
    for i, text in enumerate(raw):
        try:
            out.append(ex.parse_expr(text, dims))
        except ExprError as err:
            diag.add(f"{path}[{i}]", f"{type(err).__name__}: {err}")
            return None
    return tuple(out)


def _parse_set(raw, n, path, diag):
    if not isinstance(raw, Mapping):
        diag.add(path, "expected a table with 'box' and optional 'constraints'")
        return None
    diag.unknown(raw, _SET_KEYS, path)
    if "box" not in raw:
        diag.add(f"{path}.box", "missing")
        return None
    base = _parse_box(raw["box"], n, f"{path}.box", diag)
    cons = _parse_exprs(raw.get("constraints", []), (n, 0, 0), f"{path}.constraints", diag)
    if base is None or cons is None:
        return None
    return ConstrainedSet(base, cons)


DEFAULT_CERT_HIDDEN = ((8, "tanh"), (8, "square"))
DEFAULT_CTRL_HIDDEN = ((8, "tanh"),)


def _parse_shape(raw, input_dim, output_dim, clamp, path, diag, default_hidden=()):
    from .net import ACTIVATIONS, NetworkShape

    if not isinstance(raw, Mapping):
        diag.add(path, "expected a table")
        return None
    diag.unknown(raw, _NET_KEYS, path)
    hidden_raw = raw.get("hidden", [list(h) for h in default_hidden])
    hidden = []
    if not isinstance(hidden_raw, (list, tuple)):
        diag.add(f"{path}.hidden", "expected a list of [width, activation] pairs")
        return None
    for i, layer in enumerate(hidden_raw):
        if (not isinstance(layer, (list, tuple)) or len(layer) != 2
                or isinstance(layer[0], bool) or not isinstance(layer[0], int)
                or not isinstance(layer[1], str)):
            diag.add(f"{path}.hidden[{i}]", "expected [width, activation]")
            return None
        width, act = layer
        if width < 1:
            diag.add(f"{path}.hidden[{i}]", f"width must be >= 1, got {width}")
            return None
        if act not in ACTIVATIONS:
            diag.add(f"{path}.hidden[{i}]", f"unknown activation {act!r}; choose from {ACTIVATIONS}")
            return None
        hidden.append((width, act))
    return NetworkShape(input_dim, tuple(hidden), output_dim, clamp)


def _parse_system(raw, diag):
    if not isinstance(raw, Mapping):
        diag.add("system", "missing or not a table")
        return None
    diag.unknown(raw, _SYSTEM_KEYS, "system")
    try:
        kind = SystemKind(raw.get("kind"))
    except ValueError:
        diag.add("system.kind", f"expected one of {[k.value for k in SystemKind]}, got {raw.get('kind')!r}")
        return None
    n = _as_int(raw.get("n_state"), "system.n_state", diag, minimum=1)
    m = _as_int(raw.get("n_input", 0), "system.n_input", diag, minimum=0)
    if n is None or m is None:
        return None
    noise = ()
    n_noise = 0
    raw_noise = raw.get("noise", [])
    if kind is SystemKind.STOCHASTIC:
        if not raw_noise:
            diag.add("system.noise", "stochastic systems need a nonempty noise support")
            return None
        entries = []
        for i, item in enumerate(raw_noise):
            if not isinstance(item, Mapping) or set(item) != {"w", "p"}:
                diag.add(f"system.noise[{i}]", "expected a table with keys 'w' and 'p'")
                return None
            w = item["w"]
            if not isinstance(w, (list, tuple)) or not w:
                diag.add(f"system.noise[{i}].w", "expected a nonempty list of numbers")
                return None
            wv = [_as_float(v, f"system.noise[{i}].w[{j}]", diag) for j, v in enumerate(w)]
            p = _as_float(item["p"], f"system.noise[{i}].p", diag, positive=True)
            if None in wv or p is None:
                return None
            entries.append((tuple(wv), p))
        n_noise = len(entries[0][0])
        if any(len(w) != n_noise for w, _ in entries):
            diag.add("system.noise", "noise support points differ in dimension")
            return None
        total = math.fsum(p for _, p in entries)
        if abs(total - 1.0) > 1e-12:
            diag.add("system.noise", f"noise probabilities sum to {total:.12g}, expected 1")
            return None
        noise = tuple(entries)
    elif raw_noise:
        diag.add("system.noise", "noise support is only allowed for stochastic systems")
        return None
    input_box = None
    if m > 0:
        if "input_box" not in raw:
            diag.add("system.input_box", "required when n_input > 0")
            return None
        input_box = _parse_box(raw["input_box"], m, "system.input_box", diag)
        if input_box is None:
            return None
    elif "input_box" in raw:
        diag.add("system.input_box", "given but n_input = 0")
        return None
    dyn = _parse_exprs(raw.get("dynamics"), (n, m, n_noise), "system.dynamics", diag)
    if dyn is None:
        return None
    if len(dyn) != n:
        diag.add("system.dynamics", f"{len(dyn)} components given, n_state = {n}")
        return None
    return System(kind, n, m, dyn, noise, input_box)


def _parse_spec(raw, n, diag):
    if not isinstance(raw, Mapping) or "kind" not in raw:
        diag.add("spec", "missing or has no 'kind'")
        return None
    kind = raw["kind"]
    if kind not in SPEC_TYPES:
        diag.add("spec.kind", f"expected one of {sorted(SPEC_TYPES)}, got {kind!r}")
        return None
    allowed = {"kind", *_SET_FIELDS[kind], *_SCALAR_FIELDS[kind]}
    if kind == "stability":
        allowed |= {"equilibrium"}
    diag.unknown(raw, allowed, "spec")
    kwargs = {}
    for name in _SET_FIELDS[kind]:
        if name not in raw:
            diag.add(f"spec.{name}", "missing")
            return None
        s = _parse_set(raw[name], n, f"spec.{name}", diag)
        if s is None:
            return None
        kwargs[name] = s
    for name in _SCALAR_FIELDS[kind]:
        if kind == "stability" and name == "radius" and "radius" not in raw:
            kwargs[name] = None  # defaulted against the domain later
            continue
        if name not in raw:
            diag.add(f"spec.{name}", "missing")
            return None
        v = _as_float(raw[name], f"spec.{name}", diag, positive=True)
        if v is None:
            return None
        kwargs[name] = v
    if kind == "stability":
        eq = raw.get("equilibrium", [0.0] * n)
        if not isinstance(eq, (list, tuple)) or len(eq) != n:
            diag.add("spec.equilibrium", f"expected {n} coordinates")
            return None
        vals = [_as_float(v, f"spec.equilibrium[{i}]", diag) for i, v in enumerate(eq)]
        if None in vals:
            return None
        kwargs["equilibrium"] = tuple(vals)
    return SPEC_TYPES[kind](**kwargs)


def _parse_rules(raw, diag):
    if not isinstance(raw, Mapping):
        diag.add("rules", "expected a table")
        return RuleParams()
    diag.unknown(raw, _RULE_KEYS, "rules")
    kwargs = {}
    for key in ("mu_pos", "mu_dec", "band"):
        if key in raw:
            v = _as_float(raw[key], f"rules.{key}", diag, positive=True)
            if v is not None:
                kwargs[key] = v
    if "psafe_slack" in raw:
        v = _as_float(raw["psafe_slack"], "rules.psafe_slack", diag)
        if v is not None and v < 0:
            diag.add("rules.psafe_slack", "must be >= 0")
        elif v is not None:
            kwargs["psafe_slack"] = v
    if "psafe_horizon" in raw:
        v = _as_int(raw["psafe_horizon"], "rules.psafe_horizon", diag, minimum=0)
        if v is not None:
            kwargs["psafe_horizon"] = v
    if "check_domain_invariance" in raw:
        v = raw["check_domain_invariance"]
        if not isinstance(v, bool):
            diag.add("rules.check_domain_invariance", "expected true or false")
        else:
            kwargs["check_domain_invariance"] = v
    params = RuleParams(**kwargs)
    if params.psafe_slack > 0 and params.psafe_horizon < 1:
        diag.add("rules.psafe_horizon", "a positive horizon is required when psafe_slack > 0")
    return params


def validate_problem(raw: Mapping) -> Problem:
    """Build a :class:`Problem` from its raw mapping form, checking every invariant.

    Raises :class:`MalformedProblem` carrying one diagnostic per violation.
    The ``train``/``verify``/``cegis`` sections are accepted here and validated
    by the CEGIS configuration loader.
    """
    diag = _Diagnostics()
    if not isinstance(raw, Mapping):
        raise MalformedProblem([("", "problem description must be a table")])
    diag.unknown(raw, TOP_LEVEL_KEYS, "")
    system = _parse_system(raw.get("system"), diag)
    if system is None:
        raise MalformedProblem(diag.items)
    n = system.n_state
    domain = _parse_set(raw.get("domain"), n, "domain", diag)
    spec = _parse_spec(raw.get("spec"), n, diag)
    cert_shape = _parse_shape(raw.get("certificate", {}), n, 1, None, "certificate", diag,
                              DEFAULT_CERT_HIDDEN)
    ctrl_shape = None
    if "controller" in raw:
        if system.n_input == 0:
            diag.add("controller", "controller shape given but n_input = 0")
        else:
            ctrl_shape = _parse_shape(raw["controller"], n, system.n_input,
                                      system.input_box, "controller", diag, DEFAULT_CTRL_HIDDEN)
    elif system.n_input > 0:
        diag.add("controller", "required when n_input > 0")
    rules = _parse_rules(raw.get("rules", {}), diag)
    seed = _as_int(raw.get("seed", 0), "seed", diag, minimum=0)

    if domain is not None and spec is not None:
        if isinstance(spec, Stability):
            eq = np.array(spec.equilibrium)
            if not domain.base.contains(eq):
                diag.add("spec.equilibrium", "equilibrium lies outside the domain box")
            if spec.radius is None:
                spec = Stability(spec.equilibrium, 0.05 * float(np.min(domain.base.widths)) / 2.0)
            if spec.radius <= 0:
                diag.add("spec.radius", "must be > 0")
        for name in _SET_FIELDS[spec.kind]:
            s = getattr(spec, name)
            if not s.base.issubset(domain.base):
                diag.add(f"spec.{name}.box", "set box is not contained in the domain box")
        try:
            check_spec_system(spec, system)
        except SpecSystemMismatch as err:
            diag.add("spec.kind", str(err))
    if diag.items:
        raise MalformedProblem(diag.items)
    return Problem(system, domain, spec, cert_shape, ctrl_shape, rules, seed)


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------

def _controls(system, controller, X):
    if system.n_input == 0:
        if controller is not None:
            raise ValueError("controller given for a system without inputs")
        return None
    if controller is None:
        raise ValueError("system has inputs but no controller was given")
    from .net import forward

    return forward(controller, X)


def closed_loop(system: System, controller, X, w=None):
    """Closed-loop successor (or vector field) at N points; (N, n_state)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = _controls(system, controller, X)
    return system.field(X, U, w)


def step(system: System, controller, x, noise_index: int | None = None) -> np.ndarray:
    """One application of the closed-loop map ``f(x, g(x), w_m)``.

    Continuous systems return the vector field value, not an integration step.
    """
    x = np.asarray(x, dtype=float)
    if system.kind is SystemKind.STOCHASTIC:
        if noise_index is None or not 0 <= noise_index < len(system.noise):
            raise ValueError(f"noise_index must be in [0, {len(system.noise)})")
        w = system.noise_points[noise_index]
    else:
        if noise_index is not None:
            raise ValueError("noise_index given for a deterministic system")
        w = None
    out = closed_loop(system, controller, x[None, :], w)[0]
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult("dynamics produced a non-finite state")
    return out


def simulate_rk4(system: System, controller, x0, dt: float, steps: int) -> np.ndarray:
    """Fixed-step RK4 trajectory of a continuous system (test support only)."""
    if system.kind is not SystemKind.CONTINUOUS:
        raise ValueError("RK4 simulation applies to continuous systems")
    X = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    out = [X.copy()]
    f = lambda Z: closed_loop(system, controller, Z)  # noqa: E731
    for _ in range(steps):
        k1 = f(X)
        k2 = f(X + 0.5 * dt * k1)
        k3 = f(X + 0.5 * dt * k2)
        k4 = f(X + dt * k3)
        X = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(X.copy())
    return np.stack(out, axis=1)


def simulate_stochastic_hits(system: System, controller, x0, unsafe: ConstrainedSet,
                             domain: ConstrainedSet, n_traj: int, horizon: int,
                             rng: np.random.Generator):
    """Monte-Carlo count of trajectories that enter ``unsafe`` within ``horizon``.

    Trajectories leaving ``domain`` are censored (counted as neither).
    Returns ``(hits, censored)``.
    """
    X = np.broadcast_to(np.asarray(x0, dtype=float), (n_traj, system.n_state)).copy()
    alive = np.ones(n_traj, dtype=bool)
    hit = unsafe.members(X)
    alive &= ~hit
    censored = np.zeros(n_traj, dtype=bool)
    probs = system.noise_probs
    pts = system.noise_points
    for _ in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        choice = rng.choice(len(probs), size=idx.size, p=probs)
        Xa = X[idx]
        U = _controls(system, controller, Xa)
        nxt = system.field(Xa, U, pts[choice])
        X[idx] = nxt
        now_hit = unsafe.members(nxt)
        out = ~domain.members(nxt) & ~now_hit
        hit[idx[now_hit]] = True
        censored[idx[out]] = True
        alive[idx[now_hit | out]] = False
    return int(hit.sum()), int(censored.sum())

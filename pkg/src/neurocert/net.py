"""Small multilayer networks used as certificates and controllers.

Layers compute ``z_l = act_l(W_l z_{l-1} + b_l)``; the last layer is affine.
Controllers may end in a box clamp ``center + halfwidth * tanh(.)`` so every
output (and every output enclosure) lies inside the input box.

All batched functions take points as rows: ``X`` has shape (N, input_dim).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import MalformedProblem, NonFiniteBound, NonFiniteResult, ReluNotSupported
from .expr import Box, iv_powint

ACTIVATIONS = ("tanh", "relu", "square")


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden: tuple = ()  # ((width, activation), ...)
    output_dim: int = 1
    clamp: Box | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(w), str(a)) for w, a in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise MalformedProblem("network input and output dimensions must be >= 1")
        for w, a in self.hidden:
            if w < 1:
                raise MalformedProblem(f"layer width must be >= 1, got {w}")
            if a not in ACTIVATIONS:
                raise MalformedProblem(f"unknown activation {a!r}")
        if self.clamp is not None and self.clamp.dim != self.output_dim:
            raise MalformedProblem("clamp box dimension differs from output_dim")

    @property
    def dims(self):
        return [self.input_dim] + [w for w, _ in self.hidden] + [self.output_dim]

    @property
    def activations(self):
        return [a for _, a in self.hidden]

    @property
    def uses_relu(self):
        return "relu" in self.activations

    @property
    def n_params(self):
        d = self.dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))


class Network:
    """Weights and biases for a :class:`NetworkShape`.

    Treated as an immutable value outside the Learner; use :meth:`with_params`
    to derive an updated copy.
    """

    def __init__(self, shape: NetworkShape, weights, biases):
        self.shape = shape
        self.weights = tuple(np.array(W, dtype=float) for W in weights)
        self.biases = tuple(np.array(b, dtype=float).reshape(-1) for b in biases)
        d = shape.dims
        if len(self.weights) != len(d) - 1 or len(self.biases) != len(d) - 1:
            raise MalformedProblem("number of layers does not match the shape")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (d[i + 1], d[i]) or b.shape != (d[i + 1],):
                raise MalformedProblem(
                    f"layer {i}: expected W {(d[i + 1], d[i])} and b {(d[i + 1],)}, "
                    f"got {W.shape} and {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise MalformedProblem(f"layer {i} has non-finite parameters")

    def params(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_params(self, vec) -> "Network":
        vec = np.asarray(vec, dtype=float)
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(vec[k:k + W.size].reshape(W.shape))
            k += W.size
            bs.append(vec[k:k + b.size])
            k += b.size
        return Network(self.shape, Ws, bs)

    def __eq__(self, other):
        return (isinstance(other, Network) and self.shape == other.shape
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))

    def __repr__(self):
        return f"Network({self.shape.dims}, {self.shape.activations})"


def flatten_grads(grads) -> np.ndarray:
    dWs, dbs = grads
    parts = []
    for dW, db in zip(dWs, dbs):
        parts.append(dW.ravel())
        parts.append(db)
    return np.concatenate(parts)


def init_network(shape: NetworkShape, seed: int) -> Network:
    """Glorot-uniform weights, zero biases, reproducible per seed."""
    rng = np.random.default_rng(seed)
    d = shape.dims
    Ws, bs = [], []
    for i in range(len(d) - 1):
        s = np.sqrt(6.0 / (d[i] + d[i + 1]))
        Ws.append(rng.uniform(-s, s, size=(d[i + 1], d[i])))
        bs.append(np.zeros(d[i + 1]))
    return Network(shape, Ws, bs)


def square_network(n: int) -> Network:
    """Exact ``V(x) = sum(x_i^2)``: identity into square units, unit head."""
    shape = NetworkShape(n, ((n, "square"),), 1)
    return Network(shape, [np.eye(n), np.ones((1, n))], [np.zeros(n), np.zeros(1)])


# --------------------------------------------------------------------------
# Point semantics
# --------------------------------------------------------------------------

def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a * a


def _act_d1(name, a, z):
    if name == "tanh":
        return 1.0 - z * z
    if name == "relu":
        return (a > 0).astype(float)
    return 2.0 * a


def _act_d2(name, a, z):
    if name == "tanh":
        return -2.0 * z * (1.0 - z * z)
    if name == "relu":
        return np.zeros_like(a)
    return np.full_like(a, 2.0)


def _run(net, X):
    """Forward pass keeping pre-activations and activations for backprop."""
    zs, pre = [X], []
    z = X
    L = len(net.weights)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = z @ W.T + b
        pre.append(a)
        z = _act(net.shape.hidden[i][1], a) if i < L - 1 else a
        zs.append(z)
    out = z
    if net.shape.clamp is not None:
        c = net.shape.clamp
        out = c.center + 0.5 * c.widths * np.tanh(z)
    return out, zs, pre


def _rows(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != dim:
        raise ValueError(f"input has {X.shape[1]} columns, network expects {dim}")
    return X, single


def forward(net: Network, x) -> np.ndarray:
    """Network output at one point (shape (out,)) or at N rows (shape (N, out))."""
    X, single = _rows(x, net.shape.input_dim)
    with np.errstate(over="ignore", invalid="ignore"):
        out, _, _ = _run(net, X)
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult("network output is not finite")
    return out[0] if single else out


def backward(net: Network, x, upstream):
    """Reverse-mode derivatives of ``sum(upstream * forward(net, x))``.

    Returns ``(input_grad, (dWs, dbs))``; parameter gradients are summed over
    the batch, the input gradient has one row per point.
    """
    X, single = _rows(x, net.shape.input_dim)
    G = np.asarray(upstream, dtype=float).reshape(X.shape[0], net.shape.output_dim)
    with np.errstate(over="ignore", invalid="ignore"):
        _, zs, pre = _run(net, X)
        L = len(net.weights)
        if net.shape.clamp is not None:
            t = np.tanh(zs[-1])
            G = G * (0.5 * net.shape.clamp.widths) * (1.0 - t * t)
        dWs, dbs = [None] * L, [None] * L
        g = G  # adjoint of the current layer's pre-activation
        for i in range(L - 1, -1, -1):
            dWs[i] = g.T @ zs[i]
            dbs[i] = g.sum(axis=0)
            gz = g @ net.weights[i]
            if i > 0:
                name = net.shape.hidden[i - 1][1]
                g = gz * _act_d1(name, pre[i - 1], zs[i])
        input_grad = gz
    for arr in [input_grad, *dWs, *dbs]:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteResult("network gradient is not finite")
    return (input_grad[0] if single else input_grad), (dWs, dbs)


def input_gradient(net: Network, X) -> np.ndarray:
    """Gradient of a scalar network at N points, shape (N, input_dim)."""
    X, single = _rows(X, net.shape.input_dim)
    g, _ = backward(net, X, np.ones((X.shape[0], 1)))
    return g[0] if single else g


def directional(net: Network, X, V):
    """``grad forward(x) . v`` per row for a scalar identity-head network."""
    vals, _ = _directional(net, X, V)
    return vals


def _directional(net, X, V):
    zs, pre = [X], []
    tz = [V]
    z, t = X, V
    L = len(net.weights)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = z @ W.T + b
        ta = t @ W.T
        if i < L - 1:
            name = net.shape.hidden[i][1]
            z = _act(name, a)
            t = _act_d1(name, a, z) * ta
        else:
            z, t = a, ta
        pre.append((a, ta))
        zs.append(z)
        tz.append(t)
    return t[:, 0], (zs, tz, pre)


def directional_backward(net: Network, X, V, upstream):
    """Parameter and direction gradients of ``sum(upstream * grad V(x) . v)``.

    Returns ``((dWs, dbs), dV)`` where ``dV`` has the shape of ``V``. Used for
    Lie-derivative terms, which depend on the certificate's parameters through
    its input gradient.
    """
    if net.shape.clamp is not None or net.shape.output_dim != 1:
        raise ValueError("directional derivatives are defined for scalar certificates only")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    c = np.asarray(upstream, dtype=float).reshape(-1, 1)
    _, (zs, tz, pre) = _directional(net, X, V)
    L = len(net.weights)
    dWs, dbs = [None] * L, [None] * L
    g_t = c  # adjoint of the layer's tangent pre-activation
    g_a = np.zeros_like(c)  # adjoint of the layer's primal pre-activation
    for i in range(L - 1, -1, -1):
        W = net.weights[i]
        dWs[i] = g_t.T @ tz[i] + g_a.T @ zs[i]
        dbs[i] = g_a.sum(axis=0)
        g_tz = g_t @ W  # adjoint of previous tangent activation
        g_z = g_a @ W
        if i > 0:
            name = net.shape.hidden[i - 1][1]
            a, ta = pre[i - 1]
            z = zs[i]
            d1 = _act_d1(name, a, z)
            d2 = _act_d2(name, a, z)
            g_t = g_tz * d1
            g_a = g_z * d1 + g_tz * d2 * ta
    return (dWs, dbs), g_tz


# --------------------------------------------------------------------------
# Interval semantics
# --------------------------------------------------------------------------

def _iv_act(name, lo, hi):
    if name == "tanh":
        return (np.clip(kernels.down(np.tanh(lo)), -1.0, 1.0),
                np.clip(kernels.up(np.tanh(hi)), -1.0, 1.0))
    if name == "relu":
        return np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return iv_powint(lo, hi, 2)


def _iv_clamp(box, lo, hi):
    half = 0.5 * box.widths
    tlo, thi = _iv_act("tanh", lo, hi)
    c = box.center
    slo, shi = kernels.down(half * tlo), kernels.up(half * thi)
    olo, ohi = kernels.down(c + slo), kernels.up(c + shi)
    return np.clip(olo, box.lo_array, box.hi_array), np.clip(ohi, box.lo_array, box.hi_array)


def interval_forward_batch(net: Network, lo, hi):
    """Enclosures of the network output over K boxes; returns (K, out) arrays.

    Non-finite bounds come back as NaN so callers can mark those boxes undecided.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    L = len(net.weights)
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            lo, hi = kernels.iv_affine(W, b, lo, hi)
            if i < L - 1:
                lo, hi = _iv_act(net.shape.hidden[i][1], lo, hi)
        if net.shape.clamp is not None:
            lo, hi = _iv_clamp(net.shape.clamp, lo, hi)
    bad = ~(np.isfinite(lo) & np.isfinite(hi))
    return np.where(bad, np.nan, lo), np.where(bad, np.nan, hi)


def interval_forward(net: Network, b: Box):
    """Outward-rounded enclosure of ``forward(net, x)`` over the box; list of
    ``(lo, hi)`` pairs, one per output."""
    if b.dim != net.shape.input_dim:
        raise ValueError(f"box has dim {b.dim}, network expects {net.shape.input_dim}")
    lo, hi = interval_forward_batch(net, b.lo_array[None, :], b.hi_array[None, :])
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        raise NonFiniteBound("network enclosure is not finite")
    return [(float(a), float(c)) for a, c in zip(lo[0], hi[0])]


def _iv_one_minus_sq(tlo, thi):
    """Enclose ``1 - t^2`` for t in [tlo, thi]; it is monotone in |t|."""
    qlo, qhi = iv_powint(tlo, thi, 2)
    return np.clip(kernels.down(1.0 - qhi), 0.0, 1.0), np.clip(kernels.up(1.0 - qlo), 0.0, 1.0)


def interval_input_gradient_batch(net: Network, lo, hi):
    """Forward-mode enclosure of the input Jacobian over K boxes.

    Returns (K, out, n) lower/upper arrays; NaN marks failed boxes.
    """
    if net.shape.uses_relu:
        raise ReluNotSupported("interval gradients need a relu-free network")
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    K, n = lo.shape
    dlo = np.broadcast_to(np.eye(n), (K, n, n)).copy()
    dhi = dlo.copy()
    L = len(net.weights)
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            alo, ahi = kernels.iv_affine(W, b, lo, hi)
            dlo, dhi = kernels.iv_matmul_point(W, dlo, dhi)
            if i == L - 1:
                lo, hi = alo, ahi
                break
            name = net.shape.hidden[i][1]
            lo, hi = _iv_act(name, alo, ahi)
            if name == "tanh":
                slo, shi = _iv_one_minus_sq(lo, hi)
            else:
                slo, shi = 2.0 * alo, 2.0 * ahi
            dlo, dhi = kernels.iv_mul(slo[:, :, None], shi[:, :, None], dlo, dhi)
        if net.shape.clamp is not None:
            tlo, thi = _iv_act("tanh", lo, hi)
            slo, shi = _iv_one_minus_sq(tlo, thi)
            half = 0.5 * net.shape.clamp.widths
            slo, shi = kernels.down(half * slo), kernels.up(half * shi)
            dlo, dhi = kernels.iv_mul(slo[:, :, None], shi[:, :, None], dlo, dhi)
    bad = ~(np.isfinite(dlo) & np.isfinite(dhi))
    return np.where(bad, np.nan, dlo), np.where(bad, np.nan, dhi)


def interval_input_gradient(net: Network, b: Box):
    """Enclosure of the gradient of a scalar network over the box; list of
    ``(lo, hi)`` pairs, one per input."""
    if net.shape.output_dim != 1:
        raise ValueError("interval_input_gradient expects a scalar network")
    dlo, dhi = interval_input_gradient_batch(net, b.lo_array[None, :], b.hi_array[None, :])
    if np.any(np.isnan(dlo)) or np.any(np.isnan(dhi)):
        raise NonFiniteBound("gradient enclosure is not finite")
    return [(float(a), float(c)) for a, c in zip(dlo[0, 0], dhi[0, 0])]


# --------------------------------------------------------------------------
# Weight files
# --------------------------------------------------------------------------

_HEADER = "neurocert-network 1"


def _fmt(v):
    return "%.17g" % v


def dumps_network(net: Network) -> str:
    s = net.shape
    lines = [_HEADER, f"input_dim {s.input_dim}", f"output_dim {s.output_dim}",
             "hidden " + " ".join(f"{w}:{a}" for w, a in s.hidden) if s.hidden else "hidden"]
    if s.clamp is None:
        lines.append("clamp none")
    else:
        lines.append("clamp " + " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in s.clamp.pairs()))
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"layer {i} {W.shape[0]} {W.shape[1]}")
        for row in W:
            lines.append(" ".join(_fmt(v) for v in row))
        lines.append(" ".join(_fmt(v) for v in b))
    return "\n".join(lines) + "\n"


def loads_network(text: str) -> Network:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    try:
        if lines[0] != _HEADER:
            raise ValueError("missing weight-file header")
        fields = {}
        for ln in lines[1:5]:
            key, _, rest = ln.partition(" ")
            fields[key] = rest.strip()
        hidden = tuple((int(w), a) for w, a in (t.split(":") for t in fields["hidden"].split()))
        clamp = None
        if fields["clamp"] != "none":
            clamp = Box.from_pairs([tuple(float(v) for v in p.split(",")) for p in fields["clamp"].split()])
        shape = NetworkShape(int(fields["input_dim"]), hidden, int(fields["output_dim"]), clamp)
        Ws, bs = [], []
        k = 5
        for i in range(len(shape.dims) - 1):
            tag, idx, rows, cols = lines[k].split()
            if tag != "layer" or int(idx) != i:
                raise ValueError(f"expected layer {i} at line {k + 1}")
            rows, cols = int(rows), int(cols)
            W = np.array([[float(v) for v in lines[k + 1 + r].split()] for r in range(rows)])
            b = np.array([float(v) for v in lines[k + 1 + rows].split()])
            Ws.append(W.reshape(rows, cols))
            bs.append(b)
            k += rows + 2
    except (IndexError, KeyError, ValueError) as err:
        raise MalformedProblem(f"unreadable weight block: {err}") from None
    return Network(shape, Ws, bs)


def save_network(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_network(net))


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return loads_network(fh.read())

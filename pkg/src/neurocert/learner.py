"""Sample-based training of certificate and controller networks.

The loss penalises hinge violations of every VC at sampled region points:

    L = sum_vc 1/max(1, N_vc) * sum_x m(x) * max(0, violation(x) + margin)^p

where ``N_vc`` counts the regular samples of the VC, ``m`` is 1 for regular
samples and ``kappa`` for counterexamples, and points failing the VC's gate
contribute nothing. Counterexamples therefore never dilute the regular
samples: absorbing one with positive violation always raises the loss.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import net as nn
from .errors import DivergenceDetected
from .model import sample_set


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    step_size: float = 1e-2
    penalty: int = 2
    kappa: float = 10.0
    train_margin: float = 0.01
    early_stop: int = 10

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.penalty not in (1, 2):
            raise ValueError("penalty exponent must be 1 or 2")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.train_margin < 0:
            raise ValueError("train_margin must be >= 0")


@dataclass
class VCData:
    points: np.ndarray
    cex: np.ndarray
    cex_iters: list = field(default_factory=list)

    @property
    def size(self):
        return self.points.shape[0] + self.cex.shape[0]


class Dataset:
    """Per-VC regular samples and counterexamples (tagged with the iteration
    that produced them)."""

    def __init__(self, items=None):
        self.items = dict(items or {})

    def __getitem__(self, vid):
        return self.items[vid]

    def __contains__(self, vid):
        return vid in self.items

    def sizes(self):
        return {k: v.size for k, v in self.items.items()}

    def copy(self):
        return Dataset({k: VCData(v.points.copy(), v.cex.copy(), list(v.cex_iters))
                        for k, v in self.items.items()})


def sample_dataset(vcs, count: int, rng: np.random.Generator) -> Dataset:
    """Draw ``count`` region points per VC (gates are applied at loss time)."""
    items = {}
    for vc in vcs:
        pts = sample_set(vc.region, count, rng, exclude=vc.exclude)
        items[vc.id] = VCData(pts, np.zeros((0, vc.region.dim)), [])
    return Dataset(items)


def _margin(vc, config):
    return vc.train_margin if vc.train_margin is not None else config.train_margin


def _vc_terms(vc, data, cert, ctrl, config, want_grad):
    """Loss contribution, max violation and parameter gradients of one VC."""
    X = np.concatenate([data.points, data.cex], axis=0) if data.cex.size else data.points
    if X.shape[0] == 0:
        return 0.0, -math.inf, None, None
    weights = np.concatenate([np.ones(data.points.shape[0]), np.full(data.cex.shape[0], config.kappa)])
    scale = 1.0 / max(1, data.points.shape[0])
    active = np.ones(X.shape[0], dtype=bool)
    if vc.gate is not None:
        active = vc.gate_mask(X, cert)
    if not active.any():
        return 0.0, -math.inf, None, None
    Xa, wa = X[active], weights[active]
    v = vc.violation.evaluate(Xa, cert, ctrl)
    h = np.maximum(v + _margin(vc, config), 0.0)
    if config.penalty == 2:
        loss = scale * float(np.sum(wa * h * h))
        up = scale * wa * 2.0 * h
    else:
        loss = scale * float(np.sum(wa * h))
        up = scale * wa * (h > 0)
    vmax = float(np.max(v))
    if not want_grad:
        return loss, vmax, None, None
    hot = up > 0
    if not hot.any():
        return loss, vmax, None, None
    g_cert, g_ctrl = vc.violation.vjp(Xa[hot], cert, ctrl, up[hot])
    return loss, vmax, g_cert, g_ctrl


def loss(vcs, nets, dataset: Dataset, config: TrainConfig, want_grad=True):
    """Total loss and flat parameter gradients ``(L, (g_cert, g_ctrl), per_vc_max)``."""
    cert, ctrl = nets
    total = 0.0
    g_cert = np.zeros(cert.shape.n_params)
    g_ctrl = None if ctrl is None else np.zeros(ctrl.shape.n_params)
    per_vc = {}
    for vc in vcs:  # fixed order keeps the reduction deterministic
        L, vmax, gc, gu = _vc_terms(vc, dataset[vc.id], cert, ctrl, config, want_grad)
        total += L
        per_vc[vc.id] = vmax
        if gc is not None:
            g_cert += gc
        if gu is not None:
            g_ctrl += gu
    return total, (g_cert, g_ctrl), per_vc


@dataclass
class EpochRecord:
    iteration: int
    epoch: int
    loss: float
    max_violation: dict


def train(vcs, nets, dataset: Dataset, config: TrainConfig, rng=None, iteration: int = 0):
    """Full-batch Adam with a cosine-decayed step size.

    Returns ``(nets, best_loss, trace)``; ``nets`` holds the best-loss
    parameters seen. ``rng`` is accepted for interface stability; training is
    deterministic and draws no random numbers.
    """
    cert, ctrl = nets
    n_cert = cert.shape.n_params
    theta = cert.params() if ctrl is None else np.concatenate([cert.params(), ctrl.params()])

    def unpack(th):
        c = cert.with_params(th[:n_cert])
        return c, (None if ctrl is None else ctrl.with_params(th[n_cert:]))

    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    best_theta, best_loss = theta.copy(), math.inf
    first_loss = None
    zero_run = 0
    T = max(config.epochs, 1)
    for epoch in range(config.epochs):
        cur = unpack(theta)
        L, (gc, gu), per_vc = loss(vcs, cur, dataset, config)
        trace.append(EpochRecord(iteration, epoch, L, per_vc))
        if first_loss is None:
            first_loss = L
        elif first_loss > 0 and L > 1e6 * first_loss:
            raise DivergenceDetected(f"loss grew from {first_loss:.3g} to {L:.3g}")
        if L < best_loss:
            best_loss, best_theta = L, theta.copy()
        if L == 0.0:
            zero_run += 1
            if zero_run >= config.early_stop:
                break
        else:
            zero_run = 0
        g = gc if gu is None else np.concatenate([gc, gu])
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (epoch + 1))
        shat = s / (1 - b2 ** (epoch + 1))
        lr = config.step_size * 0.5 * (1.0 + math.cos(math.pi * epoch / T))
        theta = theta - lr * mhat / (np.sqrt(shat) + eps)
    if config.epochs == 0 or not trace:
        L, _, _ = loss(vcs, nets, dataset, config, want_grad=False)
        return nets, L, trace
    return unpack(best_theta), best_loss, trace


def absorb_counterexamples(dataset: Dataset, cexs, spread: int, radius: float,
                           rng: np.random.Generator, iteration: int = 0) -> Dataset:
    """Add counterexamples ``[(vc, point), ...]`` plus ``spread`` perturbed
    copies each (uniform in a ball, dropped when outside the region).

    Every counterexample is kept, even if an earlier iteration stored the same
    point; perturbed copies are deduplicated within this call.
    """
    out = dataset.copy()
    for vc, x in cexs:
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        if spread > 0:
            d = rng.normal(size=(spread, n))
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
            r = radius * rng.random((spread, 1)) ** (1.0 / n)
            cand = x + r * d
            cand = cand[vc.region_members(cand)]
            cand = cand[np.any(cand != x, axis=1)]
            cand = np.unique(cand, axis=0) if cand.size else cand.reshape(0, n)
        else:
            cand = np.zeros((0, n))
        new = np.concatenate([x[None, :], cand], axis=0)
        data = out[vc.id]
        data.cex = np.concatenate([data.cex, new], axis=0)
        data.cex_iters.extend([iteration] * new.shape[0])
    return out


def trace_csv(trace, vc_ids) -> str:
    """Epoch trace as CSV: iteration, epoch, loss, then one max-violation column per VC."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "epoch", "loss", *[f"max_violation[{v}]" for v in vc_ids]])
    for r in trace:
        w.writerow([r.iteration, r.epoch, repr(r.loss),
                    *[repr(r.max_violation.get(v, float("nan"))) for v in vc_ids]])
    return buf.getvalue()

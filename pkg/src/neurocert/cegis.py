"""Learner/verifier loop and quantitative outputs."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import learner
from . import net as nn
from .errors import DivergenceDetected, MalformedProblem, NonFiniteResult
from .expr import Box
from .learner import TrainConfig
from .model import (
    ConstrainedSet,
    ProbabilisticReachability,
    ProbabilisticSafety,
    Problem,
    classify_boxes,
    sample_set,
)
from .rules import compile_rules
from .verifier import (
    Falsified,
    ResourceExhausted,
    Unknown,
    VerifierConfig,
    all_certified,
    falsify_random,
    verify_all,
)

CERTIFIED, NOT_CERTIFIED = "Certified", "NotCertified"


@dataclass(frozen=True)
class NotChecked:
    """Verdict placeholder for VCs skipped because random screening already
    found a counterexample elsewhere in the same iteration."""

    status = "NotChecked"


@dataclass(frozen=True)
class CegisConfig:
    max_iters: int = 20
    samples: int = 500
    spread: int = 4
    spread_radius: float | None = None  # None: 0.05 * largest domain width
    falsify_samples: int = 1000
    max_restarts: int = 3
    plateau_iters: int = 3
    plateau_tol: float = 1e-3
    report_points: tuple = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    verify: VerifierConfig = field(default_factory=VerifierConfig)
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")
        if self.falsify_samples < 1:
            raise ValueError("falsify_samples must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    verdicts: dict  # vc id -> verdict summary
    cex: list  # [(vc id, point)]
    pseudo_cex: int
    dataset_sizes: dict
    boxes_processed: int
    restarted: bool = False
    diverged: bool = False
    train_seconds: float = 0.0
    verify_seconds: float = 0.0


@dataclass
class CegisResult:
    status: str
    cert: nn.Network
    ctrl: nn.Network | None
    verdicts: list
    iterations: list
    bounds: dict
    trace: list = field(default_factory=list, repr=False)


def summarize(verdict) -> dict:
    """JSON-friendly summary of a verdict."""
    out = {"status": verdict.status}
    if isinstance(verdict, Falsified):
        out.update(cex=list(verdict.cex), violation=verdict.violation)
    elif isinstance(verdict, Unknown):
        out.update(undecided=verdict.undecided, smallest_width=verdict.smallest_width)
    if hasattr(verdict, "boxes_processed"):
        out["boxes_processed"] = verdict.boxes_processed
    return out


# --------------------------------------------------------------------------
# Quantitative outputs
# --------------------------------------------------------------------------

def _subdivide(box: Box, pieces: int):
    n = box.dim
    per = max(1, int(round(pieces ** (1.0 / n))))
    edges = [np.linspace(a, b, per + 1) for a, b in box.pairs()]
    grids = np.meshgrid(*[np.arange(per)] * n, indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    lo = np.stack([edges[d][idx[:, d]] for d in range(n)], axis=1)
    hi = np.stack([edges[d][idx[:, d] + 1] for d in range(n)], axis=1)
    return lo, hi


def probability_bound(cert: nn.Network, x0, beta: float, slack: float = 0.0,
                      pieces: int = 4096) -> float:
    """Upper bound ``(B(x0) + slack) / beta`` on the probability of reaching
    the unsafe set; ``x0`` is a point or a :class:`ConstrainedSet` (then the
    supremum of B is enclosed over its boxes). Values above 1 are vacuous.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if isinstance(x0, ConstrainedSet):
        lo, hi = _subdivide(x0.base, pieces)
        _, outside = classify_boxes(x0, lo, hi)
        lo, hi = lo[~outside], hi[~outside]
        _, vhi = nn.interval_forward_batch(cert, lo, hi)
        top = float(np.max(vhi[:, 0])) if vhi.size else -math.inf
        if math.isnan(top):
            top = math.inf
        b = top
    else:
        b = float(nn.forward(cert, np.asarray(x0, dtype=float))[0])
    return max(0.0, (b + slack) / beta)


def quantitative_outputs(problem: Problem, cert, report_points=(), certified=True) -> dict:
    spec = problem.spec
    out = {}
    if isinstance(spec, ProbabilisticSafety):
        rp = problem.rule_params
        slack = rp.psafe_slack * rp.psafe_horizon
        sup = probability_bound(cert, spec.init, spec.level, slack)
        out["probability_bound_init"] = {"value": sup, "vacuous": sup > 1.0,
                                         "advisory": not certified}
        if rp.psafe_slack > 0:
            out["horizon"] = rp.psafe_horizon
        pts = []
        for x in report_points:
            v = probability_bound(cert, x, spec.level, slack)
            pts.append({"x0": [float(t) for t in x], "value": v, "vacuous": v > 1.0,
                        "advisory": not certified})
        out["probability_bound_points"] = pts
    elif isinstance(spec, ProbabilisticReachability):
        pts = []
        for x in report_points:
            v = float(nn.forward(cert, np.asarray(x, dtype=float))[0]) / spec.decrease
            pts.append({"x0": [float(t) for t in x], "expected_steps_bound": max(v, 0.0),
                        "informational": True})
        out["expected_steps_points"] = pts
    return out


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------

def _init_nets(problem: Problem, seed: int):
    cert = nn.init_network(problem.certificate_shape, seed)
    ctrl = None
    if problem.controller_shape is not None:
        ctrl = nn.init_network(problem.controller_shape, seed + 1_000_003)
    return cert, ctrl


def _plateau(losses, k, tol):
    if len(losses) < k + 1 or losses[-1] <= 0:
        return False
    window = losses[-(k + 1):]
    return all(abs(b - a) <= tol * max(abs(a), 1e-300) for a, b in zip(window, window[1:]))


def run_cegis(problem: Problem, config: CegisConfig = CegisConfig()) -> CegisResult:
    """Alternate training and verification until every VC is certified or
    the iteration budget runs out."""
    rng = np.random.default_rng(config.seed)
    cert, ctrl = _init_nets(problem, config.seed)
    vcs = compile_rules(problem, cert, ctrl)
    dataset = learner.sample_dataset(vcs, config.samples, rng)
    radius = config.spread_radius
    if radius is None:
        radius = 0.05 * float(np.max(problem.domain.base.widths))
    records, trace, losses = [], [], []
    verdicts = []
    restarts = 0
    status = NOT_CERTIFIED
    for it in range(config.max_iters):
        t0 = time.perf_counter()
        diverged = False
        try:
            (cert, ctrl), L, tr = learner.train(vcs, (cert, ctrl), dataset, config.train,
                                                iteration=it)
            trace.extend(tr)
        except (DivergenceDetected, NonFiniteResult):
            # keep the pre-training networks and let verification supply new data
            diverged = True
            L, _, _ = learner.loss(vcs, (cert, ctrl), dataset, config.train, want_grad=False)
        t1 = time.perf_counter()
        vcs = compile_rules(problem, cert, ctrl)
        cexs, pseudo_cexs = [], []
        screened = {}
        for vc in vcs:
            f = falsify_random(vc, config.falsify_samples, rng)
            if f is not None:
                cexs.append((vc, np.array(f.cex)))
                screened[vc.id] = f
        boxes = 0
        if screened:
            verdicts = [(vc.id, screened.get(vc.id, NotChecked())) for vc in vcs]
            summary = {vid: summarize(d) for vid, d in verdicts}
        else:
            verdicts = verify_all(vcs, config.verify)
            summary = {vid: summarize(d) for vid, d in verdicts}
            boxes = sum(getattr(d, "boxes_processed", 0) for _, d in verdicts)
            for vc, (_, d) in zip(vcs, verdicts):
                if isinstance(d, Falsified):
                    cexs.append((vc, np.array(d.cex)))
                elif isinstance(d, Unknown) and d.midpoints:
                    M = np.array(d.midpoints)
                    M = M[vc.region_members(M)]
                    pseudo_cexs.extend((vc, m) for m in M)
                elif isinstance(d, ResourceExhausted):
                    extra = sample_set(vc.region, max(1, config.samples // 5), rng, vc.exclude)
                    data = dataset[vc.id]
                    data.points = np.concatenate([data.points, extra], axis=0)
        t2 = time.perf_counter()
        losses.append(L)
        rec = IterationRecord(it, L, summary,
                              [(vc.id, [float(t) for t in x]) for vc, x in cexs],
                              len(pseudo_cexs), dataset.sizes(), boxes,
                              train_seconds=t1 - t0, verify_seconds=t2 - t1,
                              diverged=diverged)
        records.append(rec)
        if not screened and all_certified(verdicts):
            status = CERTIFIED
            break
        if cexs or pseudo_cexs:
            dataset = learner.absorb_counterexamples(dataset, cexs + pseudo_cexs, config.spread,
                                                     radius, rng, it)
            rec.dataset_sizes = dataset.sizes()
        if (restarts < config.max_restarts
                and _plateau(losses, config.plateau_iters, config.plateau_tol)):
            cert, ctrl = _init_nets(problem, config.seed + it)
            restarts += 1
            rec.restarted = True
            losses.clear()
    final = [(vid, d) for vid, d in verdicts]
    bounds = quantitative_outputs(problem, cert, config.report_points, status == CERTIFIED)
    return CegisResult(status, cert, ctrl, final, records, bounds, trace)


@dataclass
class CheckResult:
    verdicts: list
    bounds: dict

    @property
    def certified(self):
        return all_certified(self.verdicts)


def check_certificate(problem: Problem, cert, ctrl=None,
                      config: VerifierConfig = VerifierConfig(), report_points=()) -> CheckResult:
    """Re-verify stored networks without training."""
    if cert.shape.input_dim != problem.system.n_state:
        raise MalformedProblem(
            f"certificate input_dim {cert.shape.input_dim} != n_state {problem.system.n_state}")
    vcs = compile_rules(problem, cert, ctrl)
    verdicts = verify_all(vcs, config)
    ok = all_certified(verdicts)
    return CheckResult(verdicts, quantitative_outputs(problem, cert, report_points, ok))

"""Sound verdicts on verification conditions by interval branch-and-bound.

Each box taken from the work queue is (a) discarded when it provably misses
the region, lies inside an excluded set, or provably fails the gate; (b)
probed at candidate points, any of which with violation >= 0 is returned as
a counterexample; (c) certified when the violation enclosure has hi < 0;
(d) marked undecided when narrower than ``w_min`` (relative to the region's
base box); (e) otherwise bisected along its widest normalized dimension.
Boxes are processed in FIFO waves so interval work is vectorized.
"""
from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import net as nn
from .errors import ExprError, MalformedProblem, NeurocertError, PointOutsideRegion
from .model import classify_boxes, sample_set
from .rules import vc_violation
from .smtlib import export_smtlib  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class VerifierConfig:
    w_min: float = 1e-3
    max_boxes: int = 10**6
    samples_per_box: int = 3
    workers: int = 1
    wave: int = 256
    seed: int = 0
    max_reported_midpoints: int = 64

    def __post_init__(self):
        if not self.w_min > 0:
            raise ValueError("w_min must be > 0")
        if self.max_boxes < 1:
            raise ValueError("max_boxes must be >= 1")
        if self.samples_per_box < 1:
            raise ValueError("samples_per_box must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class Certified:
    boxes_processed: int = 0
    status = "Certified"


@dataclass(frozen=True)
class Falsified:
    cex: tuple
    violation: float
    vc_id: str
    boxes_processed: int = 0
    status = "Falsified"


@dataclass(frozen=True)
class Unknown:
    undecided: int
    smallest_width: float
    midpoints: tuple = field(default=(), repr=False)
    boxes_processed: int = 0
    status = "Unknown"


@dataclass(frozen=True)
class ResourceExhausted:
    boxes_processed: int
    status = "ResourceExhausted"


def _eval_points(vc, X):
    """Violation at each row; rows whose evaluation fails get NaN."""
    try:
        return vc.evaluate(X)
    except (ExprError, NeurocertError, FloatingPointError):
        out = np.full(X.shape[0], np.nan)
        for i in range(X.shape[0]):
            try:
                out[i] = vc.evaluate(X[i:i + 1])[0]
            except (ExprError, NeurocertError, FloatingPointError):
                pass
        return out


def _members(vc, X):
    try:
        return vc.members(X)
    except (ExprError, NeurocertError):
        mask = np.zeros(X.shape[0], dtype=bool)
        for i in range(X.shape[0]):
            try:
                mask[i] = vc.members(X[i:i + 1])[0]
            except (ExprError, NeurocertError):
                pass
        return mask


def _confirm(vc, x):
    """Re-check a candidate counterexample one point at a time."""
    try:
        if not vc.members(x[None, :])[0]:
            return None
        v = vc_violation(vc, x)
    except (ExprError, NeurocertError, PointOutsideRegion):
        return None
    return v if v >= 0 else None


def _first_falsifier(vc, X):
    mask = _members(vc, X)
    if not mask.any():
        return None
    idx = np.flatnonzero(mask)
    vals = _eval_points(vc, X[idx])
    for k in np.flatnonzero(vals >= 0):
        x = X[idx[k]]
        v = _confirm(vc, x)
        if v is not None:
            return x, v
    return None


def falsify_random(vc, n: int, rng: np.random.Generator):
    """Sample ``n`` region points and return the first violating one as a
    :class:`Falsified` verdict, or None."""
    if n < 1:
        raise ValueError("n must be >= 1")
    X = sample_set(vc.region, n, rng, exclude=vc.exclude)
    hit = _first_falsifier(vc, X)
    if hit is None:
        return None
    x, v = hit
    return Falsified(tuple(float(t) for t in x), v, vc.id, 0)


def _discard_mask(vc, lo, hi):
    inside, outside = classify_boxes(vc.region, lo, hi)
    drop = outside.copy()
    for s in vc.exclude:
        ins, _ = classify_boxes(s, lo, hi)
        drop |= ins
    if vc.gate is not None:
        keep = ~drop
        if keep.any():
            vlo, vhi = nn.interval_forward_batch(vc.cert, lo[keep], hi[keep])
            g_lo, g_hi = vc.gate
            miss = (vlo[:, 0] > g_hi) | (vhi[:, 0] < g_lo)  # NaN compares False
            drop[np.flatnonzero(keep)[miss]] = True
    return drop


def verify_vc(vc, config: VerifierConfig = VerifierConfig()):
    """Branch-and-bound verdict for one VC."""
    base = vc.region.base
    blo, bhi = base.lo_array, base.hi_array
    scale = np.where(bhi > blo, bhi - blo, 1.0)
    rng = np.random.default_rng([config.seed, sum(map(ord, vc.id))])
    n = base.dim
    queue = deque([(blo.copy(), bhi.copy())])
    processed = 0
    undecided = 0
    smallest = np.inf
    mids = []
    extra = config.samples_per_box - 1
    while queue:
        if processed >= config.max_boxes:
            return ResourceExhausted(processed)
        k = min(config.wave, len(queue), config.max_boxes - processed)
        batch = [queue.popleft() for _ in range(k)]
        lo = np.array([b[0] for b in batch])
        hi = np.array([b[1] for b in batch])
        processed += k
        keep = ~_discard_mask(vc, lo, hi)
        lo, hi = lo[keep], hi[keep]
        if lo.shape[0] == 0:
            continue
        K = lo.shape[0]
        pts = [0.5 * (lo + hi)]
        if extra > 0:
            r = rng.random((K, extra, n))
            pts.append((lo[:, None, :] + r * (hi - lo)[:, None, :]).reshape(K * extra, n))
        # order: box 0 midpoint, box 0 randoms, box 1 midpoint, ...
        P = np.concatenate([pts[0][:, None, :]] + ([pts[1].reshape(K, extra, n)] if extra else []), axis=1)
        hit = _first_falsifier(vc, P.reshape(-1, n))
        if hit is not None:
            x, v = hit
            return Falsified(tuple(float(t) for t in x), v, vc.id, processed)
        ilo, ihi = vc.interval(lo, hi)
        certified = ihi < 0  # NaN compares False: never certified
        rest = ~certified
        lo, hi = lo[rest], hi[rest]
        if lo.shape[0] == 0:
            continue
        widths = (hi - lo) / scale
        narrow = np.max(widths, axis=1) < config.w_min
        if narrow.any():
            undecided += int(narrow.sum())
            smallest = min(smallest, float(np.min(np.max(hi[narrow] - lo[narrow], axis=1))))
            room = config.max_reported_midpoints - len(mids)
            if room > 0:
                mids.extend(tuple(map(float, m)) for m in (0.5 * (lo[narrow] + hi[narrow]))[:room])
        lo, hi, widths = lo[~narrow], hi[~narrow], widths[~narrow]
        for i in range(lo.shape[0]):
            d = int(np.argmax(widths[i]))
            mid = 0.5 * (lo[i, d] + hi[i, d])
            left_hi = hi[i].copy()
            left_hi[d] = mid
            right_lo = lo[i].copy()
            right_lo[d] = mid
            queue.append((lo[i], left_hi))
            queue.append((right_lo, hi[i]))
    if undecided:
        return Unknown(undecided, smallest, tuple(mids), processed)
    return Certified(processed)


def verify_all(vcs, config: VerifierConfig = VerifierConfig()):
    """Verdicts for every VC, in input order."""
    vcs = list(vcs)
    if not vcs:
        raise MalformedProblem("no verification conditions to check")
    if config.workers > 1 and len(vcs) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            verdicts = list(pool.map(lambda v: verify_vc(v, config), vcs))
    else:
        verdicts = [verify_vc(v, config) for v in vcs]
    return [(v.id, d) for v, d in zip(vcs, verdicts)]


def all_certified(verdicts) -> bool:
    return all(isinstance(d, Certified) for _, d in verdicts)

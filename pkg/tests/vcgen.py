"""Randomized 1-D and 2-D verification conditions with a grid oracle."""
import numpy as np

from neurocert import expr as ex
from neurocert import model as md
from neurocert import net as nn
from neurocert.rules import compile_rules, expr_vc
from strategies import random_network
import zoo


def _random_poly(rng, n):
    X = [ex.StateVar(i) for i in range(n)]
    e = ex.Const(float(rng.normal()))
    for _ in range(int(rng.integers(2, 5))):
        term = ex.Const(float(rng.normal()))
        for i in range(n):
            k = int(rng.integers(0, 3))
            if k:
                term = ex.Mul(term, ex.PowInt(X[i], k))
        e = ex.Add(e, term)
    return e


def _expr_vc(rng, k):
    n = int(rng.integers(1, 3))
    lo = rng.uniform(-2, 0, size=n)
    hi = lo + rng.uniform(0.5, 2.5, size=n)
    cons = ()
    if n == 2 and rng.random() < 0.4:
        c = (lo + hi) / 2
        r2 = float(np.min(hi - lo) ** 2 / 4)
        g = ex.parse_expr(f"(x1 - {float(c[0])!r})^2 + (x2 - {float(c[1])!r})^2 - {r2!r}",
                          (2, 0, 0))
        cons = (g,)
    region = md.ConstrainedSet(ex.Box(tuple(lo), tuple(hi)), cons)
    exclude = ()
    if rng.random() < 0.3:
        exclude = (md.ball_set(tuple((lo + hi) / 2), float(np.min(hi - lo) / 5)),)
    p = _random_poly(rng, n)
    # shift so the maximum sits somewhere around zero
    X = md.sample_set(region, 4000, rng, exclude)
    top = float(np.max(ex.evaluate_batch(p, X)))
    spread = float(np.ptp(ex.evaluate_batch(p, X))) + 1e-3
    shift = top + spread * float(rng.choice([-0.05, 0.02, 0.1, 0.3]))
    e = ex.Sub(p, ex.Const(shift))
    return expr_vc(f"rand/expr{k}", region, e, exclude)


def _net_vcs(rng):
    out = []
    for name in ("stab1", "stab2", "barrier", "rank", "safe_disc", "ctrl_stab", "psafe", "inv_c"):
        p = zoo.problem(name)
        n = p.system.n_state
        if rng.random() < 0.5:
            base = nn.square_network(n)
            cert = nn.Network(nn.NetworkShape(n, ((n, "square"),), 1), base.weights,
                              base.biases).with_params(
                base.params() + 0.2 * rng.normal(size=base.shape.n_params))
        else:
            cert = random_network(rng, n, ["tanh", "square"])
        ctrl = None
        if p.controller_shape is not None:
            ctrl = random_network(rng, n, ["tanh"], n_out=p.system.n_input,
                                  clamp=p.controller_shape.clamp)
        out.extend(compile_rules(p, cert, ctrl))
    return out


def random_vcs(seed, count=50):
    """``count`` VCs: network-based ones from small problems, the rest polynomial."""
    rng = np.random.default_rng(seed)
    vcs = _net_vcs(rng)[: count // 2]
    k = 0
    while len(vcs) < count:
        vcs.append(_expr_vc(rng, k))
        k += 1
    return vcs


def grid_max(vc, pitch_fraction, chunk=200_000):
    """Maximum violation over a regular lattice of the VC region.

    Lattice spacing is ``pitch_fraction`` times each base-box width. Returns
    ``(max, argmax)``, or ``(-inf, None)`` when no lattice point is a member.
    """
    base = vc.region.base
    per = int(np.ceil(1.0 / pitch_fraction)) + 1
    axes = [np.linspace(a, b, per) for a, b in base.pairs()]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    best, arg = -np.inf, None
    for s in range(0, X.shape[0], chunk):
        Xc = X[s:s + chunk]
        Xc = Xc[vc.members(Xc)]
        if Xc.shape[0] == 0:
            continue
        with np.errstate(all="ignore"):
            v = vc.evaluate(Xc)
        i = int(np.nanargmax(v)) if np.isfinite(v).any() else None
        if i is not None and v[i] > best:
            best, arg = float(v[i]), Xc[i]
    return best, arg

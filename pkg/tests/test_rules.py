import numpy as np
import pytest

from neurocert import expr as ex
from neurocert import model as md
from neurocert import net as nn
from neurocert.cegis import _init_nets
from neurocert.errors import MalformedProblem, PointOutsideRegion, ReluNotSupported
from neurocert.expr import Box
from neurocert.rules import VC_IDS, compile_rules, expr_vc, vc_interval, vc_violation
from strategies import random_network, sample_box
import zoo


def linear_cert(a, b=0.0):
    """V(x) = a*x + b on one state."""
    return nn.Network(nn.NetworkShape(1, (), 1), [np.array([[a]])], [np.array([b])])


@pytest.mark.parametrize("name", sorted(zoo.VC_IDS))
def test_vc_ids_per_spec(name):
    p = zoo.problem(name)
    cert, ctrl = _init_nets(p, 0)
    ids = [vc.id for vc in compile_rules(p, cert, ctrl)]
    assert ids == zoo.VC_IDS[name]
    assert set(ids) <= set(VC_IDS)


def test_stability_with_square_certificate():
    p = zoo.problem("stab1")
    pos, dec = compile_rules(p, nn.square_network(1))
    # dec: grad V . f + mu_dec = -2x^2 + 1e-4
    assert vc_violation(dec, [0.5]) == pytest.approx(-0.4999, abs=1e-15)
    lo, hi = vc_interval(dec, Box((0.2,), (0.4,)))
    assert lo <= -0.3199 and hi >= -0.0799
    assert lo == pytest.approx(-0.3199) and hi == pytest.approx(-0.0799)
    # pos: V(0) - V(x) + mu_pos
    assert vc_violation(pos, [0.5]) == pytest.approx(-0.25 + p.mu_pos)
    with pytest.raises(PointOutsideRegion):
        vc_violation(pos, [0.05])  # inside the excluded ball
    with pytest.raises(PointOutsideRegion):
        vc_violation(dec, [3.0])


def test_ranking_with_identity_certificate():
    p = zoo.problem("rank")
    nonneg, rank = compile_rules(p, linear_cert(1.0))
    # rank: V(x - 1) - V(x) + delta = -1 + 0.5
    assert vc_violation(rank, [5.0]) == pytest.approx(-0.5)
    assert vc_violation(nonneg, [5.0]) == -5.0
    lo, hi = vc_interval(rank, Box((2.0,), (9.0,)))
    # the two certificate terms are enclosed independently: width 2 * 7
    assert lo <= -0.5 <= hi
    assert hi - lo == pytest.approx(14.0)


def test_barrier_values():
    p = zoo.problem("barrier")
    init, unsafe, flow = compile_rules(p, nn.square_network(1).with_params([1.0, 0.0, 1.0, -0.25]))
    # V = x^2 - 0.25
    assert vc_violation(init, [0.1]) == pytest.approx(0.01 - 0.25 + p.mu_pos)
    assert vc_violation(unsafe, [0.9]) == pytest.approx(-(0.81 - 0.25) + p.mu_pos)
    assert vc_violation(flow, [0.5]) == pytest.approx(-0.5 + 1e-4)
    assert flow.gate == (-0.1, 0.1)
    assert flow.members(np.array([[0.5], [0.9]])).tolist() == [True, False]


def test_expected_decrease_closed_form():
    p = zoo.problem("preach")
    _, edec = compile_rules(p, linear_cert(1.0))
    # E[V(x - 1 + w)] - V(x) + 0.5 = -1 + 0 + 0.5
    assert vc_violation(edec, [5.0]) == pytest.approx(-0.5)


def test_psafe_supermartingale_closed_form():
    p = zoo.problem("psafe")
    _, _, sup = compile_rules(p, nn.square_network(1))
    # E[(0.5x + w)^2] - x^2 = 0.25x^2 + 0.01 - x^2
    x = 0.4
    assert vc_violation(sup, [x]) == pytest.approx(-0.75 * x * x + 0.01)


def test_domain_invariance_membership():
    p = zoo.problem("rank_dominv")
    *_, dominv = compile_rules(p, linear_cert(1.0))
    assert vc_violation(dominv, [5.0]) < 0
    # successor 0.5: the margin is -1.5 in D and -0.5 in T; the minimum wins
    assert vc_violation(dominv, [1.5]) == pytest.approx(-1.5)


def _vcs_for_soundness():
    rng = np.random.default_rng(11)
    out = []
    for name in sorted(zoo.RAW):
        p = zoo.problem(name)
        for k in range(2):
            cert = random_network(rng, p.system.n_state, ["tanh", "square"], scale=1.0)
            ctrl = None
            if p.controller_shape is not None:
                ctrl = random_network(rng, p.system.n_state, ["tanh"], n_out=p.system.n_input,
                                      clamp=p.controller_shape.clamp)
            out.extend(compile_rules(p, cert, ctrl))
    return out


def test_vc_interval_encloses_samples():
    """Sampling containment for every VC kind; gates and exclusions ignored."""
    rng = np.random.default_rng(12)
    violations = 0
    for vc in _vcs_for_soundness():
        base = vc.region.base
        for _ in range(5):
            c = base.lo_array + (base.hi_array - base.lo_array) * rng.random(base.dim)
            w = (base.hi_array - base.lo_array) * rng.random(base.dim) * 0.3
            b = Box(tuple(c - w / 2), tuple(c + w / 2))
            lo, hi = vc.interval(b.lo_array[None], b.hi_array[None])
            if np.isnan(lo[0]):
                continue
            v = vc.evaluate(sample_box(b, 2000, rng))
            violations += int(np.sum((v < lo[0]) | (v > hi[0])))
    assert violations == 0


def test_margin_makes_rules_stricter():
    """Larger mu_dec raises the decrease violation everywhere by the difference."""
    X = np.linspace(-1, 1, 41)[:, None]
    X = X[np.abs(X[:, 0]) > 0.1]
    vals = []
    for mu in (1e-4, 1e-2, 1e-1):
        p = zoo.problem("stab1", rules={"mu_dec": mu})
        vals.append(compile_rules(p, nn.square_network(1))[1].evaluate(X))
    assert np.all(vals[0] < vals[1]) and np.all(vals[1] < vals[2])
    assert np.allclose(vals[2] - vals[0], 0.1 - 1e-4)


def test_network_mismatch_errors():
    p = zoo.problem("stab2")
    with pytest.raises(MalformedProblem):
        compile_rules(p, nn.square_network(1))
    pc = zoo.problem("ctrl_stab")
    with pytest.raises(MalformedProblem):
        compile_rules(pc, nn.square_network(1))  # controller missing
    with pytest.raises(MalformedProblem):
        compile_rules(zoo.problem("stab1"), nn.square_network(1), linear_cert(1.0))
    relu = random_network(np.random.default_rng(0), 1, ["relu"])
    with pytest.raises(ReluNotSupported):
        compile_rules(zoo.problem("stab1"), relu)
    # relu is fine for discrete rules
    compile_rules(zoo.problem("stab_disc"), relu)


def test_controller_gradient_through_successor():
    """Controller vjp of the discrete decrease term matches finite differences."""
    from strategies import central_diff, rel_err

    p = zoo.problem("ctrl_disc")
    cert, ctrl = _init_nets(p, 3)
    _, dec = compile_rules(p, cert, ctrl)
    X = np.linspace(-0.9, 0.9, 7)[:, None]
    c = np.linspace(0.5, 1.5, 7)
    _, g = dec.violation.vjp(X, cert, ctrl, c)
    f = lambda th: float(c @ dec.violation.evaluate(X, cert, ctrl.with_params(th)))  # noqa: E731
    assert rel_err(g, central_diff(f, ctrl.params())) < 1e-5


def test_expr_vc():
    s = md.ConstrainedSet(Box((0.0,), (2.0,)))
    vc = expr_vc("t", s, ex.parse_expr("x1^2 - 1", (1, 0, 0)))
    assert vc_violation(vc, [0.5]) == -0.75
    lo, hi = vc_interval(vc, Box((0.0,), (2.0,)))
    assert lo <= -1.0 and hi >= 3.0

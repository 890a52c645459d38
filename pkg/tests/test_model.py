import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurocert import expr as ex
from neurocert import model as md
from neurocert import net as nn
from neurocert.errors import EmptySetSuspected, MalformedProblem, SpecSystemMismatch
from strategies import boxes, sample_box

D2 = (2, 0, 0)


def disk(r=1.0):
    return md.ConstrainedSet(ex.Box((-2.0, -2.0), (2.0, 2.0)),
                             (ex.parse_expr(f"x1^2 + x2^2 - {r * r}", D2),))


def raw_problem(**over):
    raw = {
        "system": {"kind": "continuous", "n_state": 1, "dynamics": ["-x1"]},
        "domain": {"box": [[-1.0, 1.0]]},
        "spec": {"kind": "stability", "radius": 0.1},
    }
    for k, v in over.items():
        raw[k] = v
    return raw


# --- sets ---------------------------------------------------------------------

def test_membership_examples():
    s = disk()
    assert md.set_membership(s, [0.5, 0.5])
    assert not md.set_membership(s, [1.0, 1.0])
    assert md.set_membership(s, [1.0, 0.0])  # boundary is closed
    with pytest.raises(ValueError):
        md.set_membership(s, [0.0])


def test_classify_box_examples():
    s = disk()
    assert md.classify_box(s, ex.Box((-0.2, -0.2), (0.2, 0.2))) == "Inside"
    assert md.classify_box(s, ex.Box((1.5, 1.5), (1.9, 1.9))) == "Outside"
    assert md.classify_box(s, ex.Box((0.5, 0.5), (1.0, 1.0))) == "Undecided"
    assert md.classify_box(s, ex.Box((3.0, 0.0), (4.0, 0.0))) == "Outside"


@settings(max_examples=80)
@given(boxes(2, lo=-2.5, hi=2.0, max_width=1.5), st.integers(0, 2**32 - 1))
def test_classify_is_sound(box, seed):
    """Inside boxes contain no non-members and Outside boxes no members."""
    s = disk()
    verdict = md.classify_box(s, box)
    X = sample_box(box, 500, np.random.default_rng(seed))
    m = s.members(X)
    if verdict == "Inside":
        assert m.all()
    elif verdict == "Outside":
        assert not m.any()


def test_sample_set_members_and_determinism():
    s = disk(0.5)
    a = md.sample_set(s, 300, np.random.default_rng(7))
    b = md.sample_set(s, 300, np.random.default_rng(7))
    assert a.shape == (300, 2) and np.array_equal(a, b)
    assert s.members(a).all()
    c = md.sample_set(s, 300, np.random.default_rng(7), exclude=(md.ball_set([0, 0], 0.25),))
    assert np.all(np.sum(c**2, axis=1) > 0.25**2)


def test_sample_set_uniform_in_disk():
    """Radius distribution of uniform samples in a disk: P(r <= t) = t^2."""
    X = md.sample_set(disk(1.0), 20000, np.random.default_rng(0))
    r = np.sqrt(np.sum(X**2, axis=1))
    for t in (0.25, 0.5, 0.75):
        assert abs(np.mean(r <= t) - t * t) < 0.015


def test_sample_empty_set_detected():
    empty = md.ConstrainedSet(ex.Box((0.0,), (1.0,)), (ex.parse_expr("x1^2 + 1", (1, 0, 0)),))
    with pytest.raises(EmptySetSuspected):
        md.sample_set(empty, 5, np.random.default_rng(0))


def test_margin_sign_matches_membership():
    s = disk()
    X = np.random.default_rng(3).uniform(-3, 3, size=(2000, 2))
    assert np.array_equal(s.margin(X) <= 0, s.members(X))


# --- systems and steps -----------------------------------------------------------

def test_step_continuous_returns_field():
    p = md.validate_problem(raw_problem())
    assert md.step(p.system, None, [0.5])[0] == -0.5


def test_step_with_controller():
    sysm = md.System(md.SystemKind.DISCRETE, 1, 1, (ex.parse_expr("x1 + u1", (1, 1, 0)),),
                     input_box=ex.Box((-1.0,), (1.0,)))
    ctrl = nn.Network(nn.NetworkShape(1, (), 1), [np.array([[-0.5]])], [np.zeros(1)])
    assert md.step(sysm, ctrl, [2.0])[0] == 1.0
    with pytest.raises(ValueError):
        md.step(sysm, None, [2.0])


def test_step_stochastic_noise_index():
    p = md.validate_problem({
        "system": {"kind": "stochastic", "n_state": 1, "dynamics": ["0.5*x1 + w1"],
                   "noise": [{"w": [-0.1], "p": 0.5}, {"w": [0.1], "p": 0.5}]},
        "domain": {"box": [[-1.0, 1.0]]},
        "spec": {"kind": "probabilistic_safety", "level": 1.0,
                 "init": {"box": [[-0.05, 0.05]]}, "unsafe": {"box": [[0.9, 1.0]]}},
    })
    assert md.step(p.system, None, [0.4], 1)[0] == pytest.approx(0.3)
    assert md.step(p.system, None, [0.4], 0)[0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        md.step(p.system, None, [0.4])
    assert p.system.noise_probs.tolist() == [0.5, 0.5]
    assert p.system.noise_points.shape == (2, 1)


def test_rk4_matches_exponential_decay():
    p = md.validate_problem(raw_problem())
    traj = md.simulate_rk4(p.system, None, [1.0], 0.01, 100)
    assert abs(traj[0, -1, 0] - np.exp(-1.0)) < 1e-9


def test_input_jacobian():
    sysm = md.System(md.SystemKind.CONTINUOUS, 1, 1, (ex.parse_expr("x1*u1 + u1^2", (1, 1, 0)),),
                     input_box=ex.Box((-1.0,), (1.0,)))
    J = sysm.input_jacobian_values(np.array([[2.0]]), np.array([[3.0]]))
    assert J.shape == (1, 1, 1) and J[0, 0, 0] == 8.0


# --- problem validation ----------------------------------------------------------

def test_validate_defaults():
    raw = raw_problem()
    del raw["spec"]["radius"]
    p = md.validate_problem(raw)
    assert p.spec.radius == pytest.approx(0.05)
    assert p.spec.equilibrium == (0.0,)
    assert p.mu_pos == pytest.approx(1e-4)
    assert p.certificate_shape.hidden == md.DEFAULT_CERT_HIDDEN


def test_validate_reports_every_problem():
    raw = raw_problem(bogus=1)
    raw["spec"] = {"kind": "stability", "radius": 0.1, "equilibrium": [5.0]}
    raw["rules"] = {"band": -1.0}
    with pytest.raises(MalformedProblem) as info:
        md.validate_problem(raw)
    paths = {p for p, _ in info.value.diagnostics}
    assert {"bogus", "spec.equilibrium", "rules.band"} <= paths


@pytest.mark.parametrize("patch, path", [
    ({"system": {"kind": "continuous", "n_state": 1, "dynamics": ["-x2"]}}, "system.dynamics"),
    ({"system": {"kind": "continuous", "n_state": 1, "dynamics": ["-x1", "x1"]}}, "system.dynamics"),
    ({"system": {"kind": "stochastic", "n_state": 1, "dynamics": ["x1 + w1"],
                 "noise": [{"w": [0.1], "p": 0.4}]}}, "system.noise"),
    ({"domain": {"box": [[1.0, -1.0]]}}, "domain.box"),
    ({"spec": {"kind": "stability", "radius": 0.1, "extra": 2}}, "spec.extra"),
    ({"spec": {"kind": "warp"}}, "spec.kind"),
])
def test_validate_rejects(patch, path):
    with pytest.raises(MalformedProblem) as info:
        md.validate_problem(raw_problem(**patch))
    assert any(p.startswith(path) for p, _ in info.value.diagnostics), info.value.diagnostics


def test_spec_system_mismatch_has_guidance():
    sysm = md.System(md.SystemKind.STOCHASTIC, 1, 0, (ex.parse_expr("x1 + w1", (1, 0, 1)),),
                     noise=(((0.0,), 1.0),))
    s = md.ConstrainedSet(ex.Box((0.0,), (1.0,)))
    with pytest.raises(SpecSystemMismatch, match="probabilistic_safety"):
        md.check_spec_system(md.Safety(s, s), sysm)


def test_stochastic_hits_counts():
    sysm = md.System(md.SystemKind.STOCHASTIC, 1, 0, (ex.parse_expr("x1 + w1", (1, 0, 1)),),
                     noise=(((1.0,), 0.5), ((-1.0,), 0.5)))
    D = md.ConstrainedSet(ex.Box((-10.0,), (10.0,)))
    U = md.ConstrainedSet(ex.Box((0.5,), (1.5,)))
    hits, cens = md.simulate_stochastic_hits(sysm, None, [0.0], U, D, 4000, 1,
                                             np.random.default_rng(0))
    assert cens == 0 and abs(hits / 4000 - 0.5) < 0.05

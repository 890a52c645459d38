"""End-to-end acceptance suite: ten criteria, one pass/fail line each."""
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from neurocert import expr as ex
from neurocert import learner
from neurocert import model as md
from neurocert import net as nn
from neurocert.cegis import CERTIFIED, run_cegis
from neurocert.cli import main
from neurocert.errors import EvaluationError, IntervalError
from neurocert.learner import TrainConfig
from neurocert.problemfile import load_problem
from neurocert.rules import compile_rules, vc_interval, vc_violation
from neurocert.smtlib import check_smtlib, export_smtlib
from neurocert.verifier import Certified, Falsified, VerifierConfig, falsify_random, verify_all, verify_vc
from strategies import (
    central_diff,
    loss_gradient_error,
    min_relu_margin,
    random_expr,
    random_network,
    rel_err,
    sample_box,
)
from vcgen import grid_max, random_vcs
import zoo

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"


def synth(name):
    pf = load_problem(PROBLEMS / f"{name}.toml")
    t0 = time.perf_counter()
    res = run_cegis(pf.problem, pf.config)
    return pf, res, time.perf_counter() - t0


def test_c01_lyapunov_end_to_end():
    details, ok = [], True
    for name in ("stability_1d", "stability_2d"):
        _, res, wall = synth(name)
        good = res.status == CERTIFIED and len(res.iterations) <= 20 and wall < 120
        ok &= good
        details.append(f"{name}: {res.status} in {len(res.iterations)} it, {wall:.1f}s")
    record_criterion(1, "Lyapunov synthesis 1-D and 2-D", ok, "; ".join(details))
    assert ok, details


def test_c02_ranking_end_to_end():
    _, res, wall = synth("ranking_1d")
    ok = res.status == CERTIFIED
    record_criterion(2, "ranking function x+ = x - 1", ok,
                     f"{res.status} in {len(res.iterations)} it, {wall:.1f}s")
    assert ok


def test_c03_barrier_end_to_end():
    _, res, wall = synth("barrier_1d")
    ok = res.status == CERTIFIED
    record_criterion(3, "barrier with band rule", ok,
                     f"{res.status} in {len(res.iterations)} it, {wall:.1f}s")
    assert ok


def test_c04_probabilistic_safety_bound():
    pf, res, wall = synth("psafe_1d")
    if res.status != CERTIFIED:
        detail = (f"{res.status} after {len(res.iterations)} iterations; the strict "
                  f"supermartingale condition has no solution on this system")
        record_criterion(4, "probabilistic safety bound vs Monte-Carlo", False, detail)
        pytest.fail(detail)
    p = pf.problem
    bound = res.bounds["probability_bound_points"][0]["value"]
    n = 100_000
    hits, _ = md.simulate_stochastic_hits(p.system, None, [0.0], p.spec.unsafe, p.domain, n,
                                          1000, np.random.default_rng(0))
    b = min(bound, 1.0)
    freq = hits / n
    ok = freq <= bound + 3 * math.sqrt(b * (1 - b) / n)
    record_criterion(4, "probabilistic safety bound vs Monte-Carlo", ok,
                     f"frequency {freq:.2e}, bound {bound:.3e}")
    assert ok


def _net_gradient_errors(act, rng, count=100):
    worst = 0.0
    made = 0
    while made < count:
        n = int(rng.integers(1, 4))
        net = random_network(rng, n, [act] * int(rng.integers(1, 3)),
                             n_out=int(rng.integers(1, 3)), scale=0.8)
        X = rng.uniform(-1, 1, size=(3, n))
        if act == "relu" and min_relu_margin(net, X) < 1e-3:
            continue
        made += 1
        up = rng.normal(size=(3, net.shape.output_dim))
        gx, grads = nn.backward(net, X, up)
        f = lambda th: float(np.sum(up * nn.forward(net.with_params(th), X)))  # noqa: E731
        worst = max(worst, rel_err(nn.flatten_grads(grads), central_diff(f, net.params())))
        g = lambda flat: float(np.sum(up * nn.forward(net, flat.reshape(X.shape))))  # noqa: E731
        worst = max(worst, rel_err(gx, central_diff(g, X.ravel())))
    return worst


def _loss_gradient_errors(act, rng, count=100):
    # relu certificates only enter discrete-time rules
    names = ["rank", "stab_disc", "ctrl_disc", "psafe", "rwa"] if act == "relu" else \
            ["stab1", "stab2", "barrier", "ctrl_stab", "inv_c", "rank", "psafe", "ctrl_disc"]
    cfg = TrainConfig(train_margin=0.05)
    worst, done, skipped = 0.0, 0, 0
    while done < count:
        p = zoo.problem(names[done % len(names)])
        n = p.system.n_state
        cert = random_network(rng, n, [act, "square"] if act != "square" else [act],
                              width=(2, 4))
        ctrl = None
        if p.controller_shape is not None:
            ctrl = random_network(rng, n, ["tanh"], n_out=p.system.n_input, width=(2, 4),
                                  clamp=p.controller_shape.clamp)
        vcs = compile_rules(p, cert, ctrl)
        ds = learner.sample_dataset(vcs, 12, rng)
        ds = learner.absorb_counterexamples(ds, [(vcs[-1], ds[vcs[-1].id].points[0])], 2, 0.05, rng)
        err = loss_gradient_error(vcs, (cert, ctrl), ds, cfg)
        if err is None:
            skipped += 1
            continue
        worst = max(worst, err)
        done += 1
    return worst, skipped


def test_c05_gradient_suite():
    rng = np.random.default_rng(2024)
    parts, ok = [], True
    for act in ("tanh", "relu", "square"):
        e_net = _net_gradient_errors(act, rng)
        e_loss, skipped = _loss_gradient_errors(act, rng)
        ok &= e_net < 1e-5 and e_loss < 1e-4
        parts.append(f"{act}: net {e_net:.1e}, loss {e_loss:.1e} ({skipped} kink skips)")
    record_criterion(5, "gradients vs central differences, 100 instances per activation", ok,
                     "; ".join(parts))
    assert ok, parts


def _random_box(rng, n, lo=-2.0, span=1.5):
    a = rng.uniform(lo, lo + 3.0, size=n)
    return ex.Box(tuple(a), tuple(a + rng.uniform(0, span, size=n)))


def test_c06_interval_soundness():
    rng = np.random.default_rng(7)
    N = 10_000
    bad = {"expr": 0, "forward": 0, "gradient": 0, "vc": 0}
    used = 0
    for _ in range(40):
        e = random_expr(rng, 2)
        b = _random_box(rng, 2)
        try:
            iv = ex.interval_eval(e, b)
            with np.errstate(all="ignore"):
                v = ex.evaluate_batch(e, sample_box(b, N, rng))
        except (IntervalError, EvaluationError):  # undefined on this box
            continue
        used += 1
        bad["expr"] += int(np.sum((v < iv.lo) | (v > iv.hi)))
    for act in ("tanh", "relu", "square"):
        for _ in range(10):
            net = random_network(rng, 2, [act, act], scale=1.5)
            b = _random_box(rng, 2)
            X = sample_box(b, N, rng)
            (lo, hi), = nn.interval_forward(net, b)
            v = nn.forward(net, X)[:, 0]
            bad["forward"] += int(np.sum((v < lo) | (v > hi)))
            if act != "relu":
                enc = np.array(nn.interval_input_gradient(net, b))
                G = nn.input_gradient(net, X)
                bad["gradient"] += int(np.sum((G < enc[:, 0]) | (G > enc[:, 1])))
    for name in sorted(zoo.RAW):
        p = zoo.problem(name)
        n = p.system.n_state
        cert = random_network(rng, n, ["tanh", "square"])
        ctrl = None
        if p.controller_shape is not None:
            ctrl = random_network(rng, n, ["tanh"], n_out=p.system.n_input,
                                  clamp=p.controller_shape.clamp)
        for vc in compile_rules(p, cert, ctrl):
            base = vc.region.base
            c = base.lo_array + (base.hi_array - base.lo_array) * rng.random(n)
            w = 0.2 * (base.hi_array - base.lo_array)
            b = ex.Box(tuple(c - w / 2), tuple(c + w / 2))
            lo, hi = vc_interval(vc, b)
            v = vc.evaluate(sample_box(b, N, rng))
            bad["vc"] += int(np.sum((v < lo) | (v > hi)))
    ok = sum(bad.values()) == 0 and used >= 20
    record_criterion(6, "interval enclosures contain 10^4 samples", ok,
                     f"{used} expressions; " + ", ".join(f"{k} {v} violations" for k, v in bad.items()))
    assert ok, bad


def test_c07_grid_oracle():
    cfg = VerifierConfig(w_min=1e-2)
    tally = {"Certified": 0, "Falsified": 0, "other": 0}
    mismatches = []
    for vc in random_vcs(0, 50):
        d = verify_vc(vc, cfg)
        gmax, _ = grid_max(vc, cfg.w_min / 10)
        tally[d.status if d.status in tally else "other"] += 1
        # Certified => lattice max < 0, equivalently lattice max >= 0 => not Certified
        if isinstance(d, Certified) and not gmax < 0:
            mismatches.append((vc.id, gmax))
    ok = not mismatches
    record_criterion(7, "verifier agrees with lattice oracle on 50 VCs", ok,
                     f"{tally}, {len(mismatches)} mismatches")
    assert ok, mismatches


def test_c08_counterexample_contract():
    rng = np.random.default_rng(8)
    cfg = TrainConfig()
    falsified = invalid = absorbed = not_increasing = 0
    for vc in random_vcs(1, 50):
        verdicts = [verify_vc(vc, VerifierConfig(w_min=1e-2)), falsify_random(vc, 500, rng)]
        for d in verdicts:
            if not isinstance(d, Falsified):
                continue
            falsified += 1
            x = np.array(d.cex)
            if not (vc.members(x[None])[0] and vc_violation(vc, x) >= 0):
                invalid += 1
                continue
            ds = learner.sample_dataset([vc], 50, rng)
            nets = (vc.cert, vc.ctrl)
            before = learner.loss([vc], nets, ds, cfg, want_grad=False)[0]
            after_ds = learner.absorb_counterexamples(ds, [(vc, x)], 4, 0.05, rng)
            after = learner.loss([vc], nets, after_ds, cfg, want_grad=False)[0]
            absorbed += 1
            not_increasing += int(not after > before)
    ok = falsified > 0 and invalid == 0 and not_increasing == 0
    record_criterion(8, "counterexamples valid and loss-increasing", ok,
                     f"{falsified} falsified, {invalid} invalid, "
                     f"{not_increasing}/{absorbed} absorptions without loss increase")
    assert ok


def test_c09_determinism(tmp_path, capsys):
    ok, parts = True, []
    for name in ("stability_2d", "barrier_1d"):
        src = tmp_path / f"{name}.toml"
        shutil.copy(PROBLEMS / f"{name}.toml", src)
        a, b = tmp_path / f"{name}.a.json", tmp_path / f"{name}.b.json"
        main(["synth", str(src), "-o", str(a), "--sequential", "--seed", "3"])
        main(["synth", str(src), "-o", str(b), "--sequential", "--seed", "3"])
        same = a.read_bytes() == b.read_bytes()
        c, d = tmp_path / f"{name}.c.json", tmp_path / f"{name}.d.json"
        main(["synth", str(src), "-o", str(c), "--workers", "4", "--seed", "3"])
        main(["synth", str(src), "-o", str(d), "--workers", "4", "--seed", "3"])
        st = [json.loads(p.read_text())["status"] for p in (a, c, d)]
        ok &= same and st[1] == st[2]
        parts.append(f"{name}: sequential bytes {'equal' if same else 'differ'}, "
                     f"parallel {st[1]}/{st[2]}")
    capsys.readouterr()
    record_criterion(9, "reproducible result files", ok, "; ".join(parts))
    assert ok


def test_c10_smt_export():
    try:
        import z3
    except ImportError:
        z3 = None
    parsed = sat_ok = checked = 0
    wrong = []
    for name, make in zoo.POLY_FIXTURES:
        vcs = compile_rules(zoo.problem(name), make())
        for vc in vcs:
            text = export_smtlib(vc, "polynomial")
            check_smtlib(text)
            parsed += 1
            if z3 is None:
                continue
            (_, d), = verify_all([vc])
            if not isinstance(d, (Certified, Falsified)):
                continue
            s = z3.Solver()
            s.set("timeout", 60_000)
            s.add(z3.parse_smt2_string(text))
            res = str(s.check())
            checked += 1
            want = "unsat" if isinstance(d, Certified) else "sat"
            if res == want:
                sat_ok += 1
            else:
                wrong.append((name, vc.id, d.status, res))
    ok = parsed > 0 and not wrong
    solver = f"z3 agreed on {sat_ok}/{checked}" if z3 is not None else "no QF_NRA solver installed"
    record_criterion(10, "SMT-LIB export of 10 polynomial fixtures", ok,
                     f"{parsed} queries parsed, {solver}")
    assert ok, wrong

"""Command-line interface: synth, check, export-smt, grid, bench."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import net as nn
from .cegis import CERTIFIED, check_certificate, run_cegis, summarize
from .errors import ExprError, MalformedProblem, NeurocertError, UnsupportedNode
from .problemfile import ProblemFile, dumps_result, load_problem, load_result, result_to_dict
from .rules import compile_rules
from .smtlib import export_smtlib

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _err(msg):
    print(f"neurocert: {msg}", file=sys.stderr)


def _report_malformed(err: MalformedProblem):
    if err.diagnostics:
        for path, msg in err.diagnostics:
            _err(f"{path}: {msg}" if path else msg)
    else:
        _err(str(err))


def _apply_overrides(pf: ProblemFile, args, max_iters=None, epochs=None) -> ProblemFile:
    cfg = pf.config
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    workers = 1 if getattr(args, "sequential", False) else getattr(args, "workers", None)
    if workers is not None:
        cfg = dataclasses.replace(cfg, verify=dataclasses.replace(cfg.verify, workers=workers))
    if max_iters is not None:
        cfg = dataclasses.replace(cfg, max_iters=max_iters)
    if epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=epochs))
    return dataclasses.replace(pf, config=cfg)


def _load(path):
    try:
        return load_problem(path)
    except FileNotFoundError:
        _err(f"{path}: no such file")
    except MalformedProblem as err:
        _report_malformed(err)
    except OSError as err:
        _err(f"{path}: {err}")
    return None


def _verdict_lines(verdicts):
    return [f"{vid}: {summarize(d)['status']}" for vid, d in verdicts]


def cmd_synth(args) -> int:
    pf = _load(args.problem)
    if pf is None:
        return EXIT_INPUT
    try:
        pf = _apply_overrides(pf, args, args.max_iters, args.epochs)
    except ValueError as err:
        _err(str(err))
        return EXIT_INPUT
    t0 = time.perf_counter()
    try:
        result = run_cegis(pf.problem, pf.config)
    except MalformedProblem as err:
        _report_malformed(err)
        return EXIT_INPUT
    wall = time.perf_counter() - t0
    data = result_to_dict(pf, result, timings=not args.sequential, wall_seconds=wall)
    out = args.output or str(Path(args.problem).with_suffix(".result.json"))
    Path(out).write_text(dumps_result(data), encoding="utf-8")
    if args.json:
        print(json.dumps({"status": data["status"], "verdicts": data["verdicts"],
                          "bounds": data["bounds"], "result": out}, sort_keys=True))
    else:
        print(f"status: {result.status} after {len(result.iterations)} iteration(s)")
        for line in _verdict_lines(result.verdicts):
            print(f"  {line}")
        print(f"result written to {out}")
    return EXIT_OK if result.status == CERTIFIED else EXIT_FAIL


def _load_pair(args):
    pf = _load(args.problem)
    if pf is None:
        return None, None
    try:
        rf = load_result(args.result)
    except FileNotFoundError:
        _err(f"{args.result}: no such file")
        return None, None
    except MalformedProblem as err:
        _report_malformed(err)
        return None, None
    if rf.data.get("problem_digest") != pf.digest:
        _err(f"warning: {args.result} was produced for a different problem file (digest mismatch)")
    return pf, rf


def cmd_check(args) -> int:
    pf, rf = _load_pair(args)
    if pf is None:
        return EXIT_INPUT
    pf = _apply_overrides(pf, args)
    try:
        res = check_certificate(pf.problem, rf.cert, rf.ctrl, pf.config.verify,
                                pf.config.report_points)
    except (MalformedProblem, ExprError) as err:
        _err(str(err))
        return EXIT_INPUT
    if args.json:
        print(json.dumps({"certified": res.certified,
                          "verdicts": {vid: summarize(d) for vid, d in res.verdicts},
                          "bounds": res.bounds}, sort_keys=True, default=str))
    else:
        for line in _verdict_lines(res.verdicts):
            print(line)
        print("all certified" if res.certified else "not certified")
    return EXIT_OK if res.certified else EXIT_FAIL


def cmd_export_smt(args) -> int:
    pf, rf = _load_pair(args)
    if pf is None:
        return EXIT_INPUT
    try:
        vcs = compile_rules(pf.problem, rf.cert, rf.ctrl)
    except NeurocertError as err:
        _err(str(err))
        return EXIT_INPUT
    by_id = {vc.id: vc for vc in vcs}
    if args.vc_id not in by_id:
        _err(f"unknown vc id {args.vc_id!r}; valid ids: {', '.join(by_id)}")
        return EXIT_INPUT
    try:
        text = export_smtlib(by_id[args.vc_id], args.mode)
    except UnsupportedNode as err:
        _err(f"UnsupportedNode: {err}")
        return EXIT_INPUT
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def grid_rows(rf, resolution: int):
    problem = rf.problem_file.problem
    n = problem.system.n_state
    axes = [np.linspace(lo, hi, resolution) for lo, hi in problem.domain.base.pairs()]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1).reshape(-1, n)
    cols = [X, nn.forward(rf.cert, X)]
    if rf.ctrl is not None:
        cols.append(nn.forward(rf.ctrl, X))
    return np.concatenate(cols, axis=1)


def cmd_grid(args) -> int:
    try:
        rf = load_result(args.result)
    except FileNotFoundError:
        _err(f"{args.result}: no such file")
        return EXIT_INPUT
    except MalformedProblem as err:
        _report_malformed(err)
        return EXIT_INPUT
    n = rf.problem_file.problem.system.n_state
    if n not in (1, 2, 3):
        _err(f"grid export supports 1 to 3 state dimensions, problem has {n}")
        return EXIT_INPUT
    if args.resolution < 1:
        _err("resolution must be >= 1")
        return EXIT_INPUT
    rows = grid_rows(rf, args.resolution)
    out = sys.stdout
    if args.header:
        m = rf.ctrl.shape.output_dim if rf.ctrl is not None else 0
        names = [f"x{i + 1}" for i in range(n)] + ["V"] + [f"u{j + 1}" for j in range(m)]
        out.write(",".join(names) + "\n")
    for r in rows:
        out.write(",".join("%.17g" % v for v in r) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    d = Path(args.suite)
    files = sorted(d.glob("*.toml")) if d.is_dir() else []
    if not files:
        _err(f"{args.suite}: no problem files (*.toml) found")
        return EXIT_INPUT
    rows = []
    errored = False
    for f in files:
        t0 = time.perf_counter()
        try:
            pf = load_problem(f)
            pf = _apply_overrides(pf, args)
            res = run_cegis(pf.problem, pf.config)
            boxes = sum(r.boxes_processed for r in res.iterations)
            rows.append({"problem": f.name, "status": res.status,
                         "iterations": len(res.iterations), "boxes": boxes,
                         "seconds": round(time.perf_counter() - t0, 3)})
        except (NeurocertError, ValueError, OSError) as err:
            errored = True
            rows.append({"problem": f.name, "status": "ERROR", "iterations": 0, "boxes": 0,
                         "seconds": round(time.perf_counter() - t0, 3), "error": str(err)})
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        w = max(len("problem"), *(len(r["problem"]) for r in rows))
        print(f"{'problem':<{w}}  {'status':<12}  {'iters':>5}  {'boxes':>9}  {'seconds':>8}")
        for r in rows:
            print(f"{r['problem']:<{w}}  {r['status']:<12}  {r['iterations']:>5}  "
                  f"{r['boxes']:>9}  {r['seconds']:>8.3f}")
            if "error" in r:
                print(f"  error: {r['error']}")
    return EXIT_FAIL if errored else EXIT_OK


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="override the problem seed")
    parser.add_argument("--workers", type=int, default=default,
                        help="verifier worker threads")
    parser.add_argument("--sequential", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="single worker and no timings: bit-reproducible result files")
    parser.add_argument("--json", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="machine-readable output on stdout")


def build_parser():
    p = argparse.ArgumentParser(prog="neurocert", description=__doc__)
    _global_options(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a certificate for a problem file")
    _global_options(s, suppress=True)
    s.add_argument("problem")
    s.add_argument("-o", "--output", help="result file (default: <problem>.result.json)")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("check", help="re-verify a stored certificate")
    _global_options(c, suppress=True)
    c.add_argument("problem")
    c.add_argument("result")
    c.set_defaults(func=cmd_check)

    e = sub.add_parser("export-smt", help="write one VC as an SMT-LIB 2 query")
    _global_options(e, suppress=True)
    e.add_argument("problem")
    e.add_argument("result")
    e.add_argument("vc_id")
    e.add_argument("--mode", choices=("polynomial", "dreal"), default="polynomial")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_export_smt)

    g = sub.add_parser("grid", help="CSV lattice of certificate (and controller) values")
    _global_options(g, suppress=True)
    g.add_argument("result")
    g.add_argument("--resolution", type=int, default=21)
    g.add_argument("--header", action="store_true")
    g.set_defaults(func=cmd_grid)

    b = sub.add_parser("bench", help="run every problem file in a directory")
    _global_options(b, suppress=True)
    b.add_argument("suite")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

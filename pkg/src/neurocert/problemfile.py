"""TOML problem files and JSON result files."""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
import tomli
import tomli_w

from . import __version__
from . import net as nn
from .cegis import CegisConfig, CegisResult, summarize
from .errors import MalformedProblem
from .expr import unparse
from .learner import TrainConfig
from .model import (
    _SCALAR_FIELDS,
    _SET_FIELDS,
    Problem,
    Stability,
    validate_problem,
)
from .verifier import VerifierConfig

_TRAIN_KEYS = {"epochs": int, "step_size": float, "penalty": int, "kappa": float,
               "train_margin": float}
_VERIFY_KEYS = {"w_min": float, "max_boxes": int, "samples_per_box": int, "workers": int}
_CEGIS_KEYS = {"max_iters": int, "samples": int, "spread": int, "spread_radius": float,
               "falsify_samples": int, "max_restarts": int, "report_points": list}


@dataclass(frozen=True)
class ProblemFile:
    problem: Problem
    config: CegisConfig
    raw: dict
    digest: str


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _section(raw, name, keys, diag):
    sec = raw.get(name, {})
    if not isinstance(sec, Mapping):
        diag.append((name, "expected a table"))
        return {}
    out = {}
    for k, v in sec.items():
        if k not in keys:
            diag.append((f"{name}.{k}", f"unknown key {k!r}"))
            continue
        want = keys[k]
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, want) or isinstance(v, bool):
            diag.append((f"{name}.{k}", f"expected {want.__name__}, got {v!r}"))
            continue
        out[k] = v
    return out


def _configs(raw, problem, diag):
    train = _section(raw, "train", _TRAIN_KEYS, diag)
    verify = _section(raw, "verify", _VERIFY_KEYS, diag)
    cegis = _section(raw, "cegis", _CEGIS_KEYS, diag)
    if "report_points" in cegis:
        pts = cegis["report_points"]
        n = problem.system.n_state if problem else None
        ok = all(isinstance(p, list) and (n is None or len(p) == n)
                 and all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in p)
                 for p in pts)
        if not ok:
            diag.append(("cegis.report_points", f"expected a list of points with {n} coordinates"))
            cegis.pop("report_points")
        else:
            cegis["report_points"] = tuple(tuple(float(t) for t in p) for p in pts)
    try:
        tc = TrainConfig(**train)
        vc = VerifierConfig(**verify)
        return CegisConfig(train=tc, verify=vc, seed=problem.seed if problem else 0, **cegis)
    except (TypeError, ValueError) as err:
        diag.append(("train/verify/cegis", str(err)))
        return None


def _locate(text, path):
    """Best-effort 1-based line number of the key named last in ``path``."""
    key = re.split(r"[.\[]", path.rstrip("]"))[-1] if path else ""
    if not key or not text:
        return None
    pat = re.compile(rf"^\s*(\[+\s*{re.escape(path.split('.')[0])}|{re.escape(key)}\s*=)", re.M)
    exact = re.compile(rf"^\s*{re.escape(key)}\s*=", re.M)
    m = exact.search(text) or pat.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_problem_text(text: str, source: str = "<string>") -> ProblemFile:
    data = text.encode("utf-8")
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        raise MalformedProblem([(source, f"TOML syntax error: {err}")]) from None
    diag = []
    problem = None
    try:
        problem = validate_problem(raw)
    except MalformedProblem as err:
        diag.extend(err.diagnostics)
    config = _configs(raw, problem, diag)
    if diag:
        located = []
        for path, msg in diag:
            line = _locate(text, path)
            where = f"{source}:{line}" if line else source
            located.append((path, f"{where}: {msg}"))
        raise MalformedProblem(located)
    return ProblemFile(problem, config, raw, digest_bytes(data))


def load_problem(path) -> ProblemFile:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedProblem([(str(path), "file is not UTF-8 text")]) from None
    pf = parse_problem_text(text, str(path))
    return replace(pf, digest=digest_bytes(data))


# --------------------------------------------------------------------------
# Canonical serialization
# --------------------------------------------------------------------------

def _set_raw(s):
    out = {"box": [[lo, hi] for lo, hi in s.base.pairs()]}
    if s.constraints:
        out["constraints"] = [unparse(g) for g in s.constraints]
    return out


def _shape_raw(shape):
    return {"hidden": [[w, a] for w, a in shape.hidden]}


def problem_to_raw(problem: Problem, config: CegisConfig | None = None) -> dict:
    sysm = problem.system
    system = {"kind": sysm.kind.value, "n_state": sysm.n_state, "n_input": sysm.n_input,
              "dynamics": [unparse(f) for f in sysm.dynamics]}
    if sysm.noise:
        system["noise"] = [{"w": list(w), "p": p} for w, p in sysm.noise]
    if sysm.input_box is not None:
        system["input_box"] = [[lo, hi] for lo, hi in sysm.input_box.pairs()]
    spec = problem.spec
    sraw = {"kind": spec.kind}
    for name in _SET_FIELDS[spec.kind]:
        sraw[name] = _set_raw(getattr(spec, name))
    for name in _SCALAR_FIELDS[spec.kind]:
        sraw[name] = getattr(spec, name)
    if isinstance(spec, Stability):
        sraw["equilibrium"] = list(spec.equilibrium)
    rp = problem.rule_params
    rules = {"mu_dec": rp.mu_dec, "band": rp.band,
             "check_domain_invariance": rp.check_domain_invariance}
    if rp.mu_pos is not None:
        rules["mu_pos"] = rp.mu_pos
    if rp.psafe_slack > 0 or rp.psafe_horizon > 0:
        rules["psafe_slack"] = rp.psafe_slack
        rules["psafe_horizon"] = rp.psafe_horizon
    seed = config.seed if config is not None else problem.seed
    raw = {"seed": seed, "system": system, "domain": _set_raw(problem.domain),
           "spec": sraw, "certificate": _shape_raw(problem.certificate_shape), "rules": rules}
    if problem.controller_shape is not None:
        raw["controller"] = _shape_raw(problem.controller_shape)
    if config is not None:
        t, v = config.train, config.verify
        raw["train"] = {k: getattr(t, k) for k in _TRAIN_KEYS}
        raw["verify"] = {k: getattr(v, k) for k in _VERIFY_KEYS}
        c = {k: getattr(config, k) for k in _CEGIS_KEYS if k not in ("spread_radius", "report_points")}
        if config.spread_radius is not None:
            c["spread_radius"] = config.spread_radius
        if config.report_points:
            c["report_points"] = [list(p) for p in config.report_points]
        raw["cegis"] = c
    return raw


def dumps_problem(problem: Problem, config: CegisConfig | None = None) -> str:
    return tomli_w.dumps(problem_to_raw(problem, config))


# --------------------------------------------------------------------------
# Result files
# --------------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)  # "inf"/"nan" strings keep the file strict JSON
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    return v


def result_to_dict(pf: ProblemFile, result: CegisResult, timings: bool = True,
                   wall_seconds: float | None = None) -> dict:
    iters = []
    for r in result.iterations:
        rec = {"iteration": r.iteration, "loss": r.loss, "verdicts": r.verdicts,
               "cex": [[vid, x] for vid, x in r.cex], "pseudo_cex": r.pseudo_cex,
               "dataset_sizes": r.dataset_sizes, "boxes_processed": r.boxes_processed,
               "restarted": r.restarted, "diverged": r.diverged}
        if timings:
            rec["train_seconds"] = r.train_seconds
            rec["verify_seconds"] = r.verify_seconds
        iters.append(rec)
    out = {
        "tool": "neurocert",
        "version": __version__,
        "problem_digest": pf.digest,
        "problem": dumps_problem(pf.problem, pf.config),
        "status": result.status,
        "verdicts": {vid: summarize(d) for vid, d in result.verdicts},
        "certificate": nn.dumps_network(result.cert),
        "controller": nn.dumps_network(result.ctrl) if result.ctrl is not None else None,
        "bounds": result.bounds,
        "iterations": iters,
    }
    if timings and wall_seconds is not None:
        out["wall_seconds"] = wall_seconds
    return _jsonable(out)


def dumps_result(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=2, allow_nan=False) + "\n"


@dataclass
class ResultFile:
    data: dict
    cert: nn.Network
    ctrl: nn.Network | None
    problem_file: ProblemFile


def load_result(path) -> ResultFile:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise MalformedProblem([(str(path), f"result file is not JSON: {err}")]) from None
    try:
        cert = nn.loads_network(data["certificate"])
        ctrl = nn.loads_network(data["controller"]) if data.get("controller") else None
        pf = parse_problem_text(data["problem"], f"{path}:problem")
    except (KeyError, TypeError) as err:
        raise MalformedProblem([(str(path), f"result file lacks {err}")]) from None
    return ResultFile(data, cert, ctrl, pf)

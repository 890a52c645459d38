"""Compare the compiled and numpy interval kernels.

Times the raw kernels and one end-to-end branch-and-bound run under each
backend, and checks that both produce bit-identical results.

    python3 benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import time

import numpy as np

from neurocert import kernels
from neurocert import net as nn
from neurocert.model import validate_problem
from neurocert.rules import compile_rules
from neurocert.verifier import VerifierConfig, verify_all

STAB2 = {
    "system": {"kind": "continuous", "n_state": 2, "dynamics": ["-x1 + 0.5*x2", "-x2"]},
    "domain": {"box": [[-1, 1], [-1, 1]]},
    "spec": {"kind": "stability", "radius": 0.1},
}


def best_of(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def kernel_cases(rng, K, width):
    W, b = rng.normal(size=(width, width)), rng.normal(size=width)
    lo = rng.normal(size=(K, width))
    hi = lo + rng.random((K, width))
    return {
        "iv_affine": lambda: kernels.iv_affine(W, b, lo, hi),
        "iv_mul": lambda: kernels.iv_mul(lo, hi, hi - 1.0, hi),
        "iv_sum_rows": lambda: kernels.iv_sum_rows(lo, hi),
    }


def verify_case():
    problem = validate_problem(STAB2)
    cert = nn.square_network(2)
    vcs = compile_rules(problem, cert)
    cfg = VerifierConfig(w_min=1e-3)
    return lambda: [(vid, d.status, getattr(d, "boxes_processed", 0))
                    for vid, d in verify_all(vcs, cfg)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--boxes", type=int, default=4096, help="boxes per kernel call")
    ap.add_argument("--width", type=int, default=16, help="layer width")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends available: {', '.join(backends)} (default: {kernels.backend()})")
    if len(backends) < 2:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")

    rows = []
    results = {}
    for name in backends:
        with kernels.use_backend(name):
            cases = kernel_cases(np.random.default_rng(0), args.boxes, args.width)
            cases["verify stab2"] = verify_case()
            for case, fn in cases.items():
                t, out = best_of(fn, args.repeats)
                rows.append((case, name, t))
                results[(case, name)] = out

    print(f"\n{'case':<14} {'backend':<8} {'seconds':>10} {'speedup':>8}")
    base = {case: t for case, name, t in rows if name == "python"}
    for case, name, t in rows:
        print(f"{case:<14} {name:<8} {t:>10.5f} {base[case] / t:>7.2f}x")

    if len(backends) == 2:
        same = True
        for case, _, _ in rows:
            a, c = results[(case, "python")], results[(case, "cython")]
            if isinstance(a, tuple):
                same &= all(np.array_equal(x, y) for x, y in zip(a, c))
            else:
                same &= a == c
        print(f"\nresults bit-identical across backends: {same}")


if __name__ == "__main__":
    main()

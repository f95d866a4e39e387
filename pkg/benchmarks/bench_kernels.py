"""Numba kernels vs the numpy fallback.

Times every hot kernel at several batch sizes on both paths, then times one
short end-to-end MLP run in the current process and in a subprocess with
``BVRLP_DISABLE_JIT=1``.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from bvrlp import kernels
from bvrlp._jit import BACKEND, NUMBA_AVAILABLE

ROWS = (16, 64, 160, 256, 512, 1024, 2048, 4096)
D_IN, HIDDEN, C = 16, 16, 10

E2E = """
import time
from bvrlp.optimizers import RunConfig, run_bvr_l_psgd
from bvrlp.problems import build_mlp_softplus
pr = build_mlp_softplus(8, q=0.35, n=5000, d_in=16, C=10, hidden=16)
cfg = RunConfig(eta=0.05, b=16, K=64, T=2, S=5, P=8, r=0.5, budget_B=1024)
run_bvr_l_psgd(cfg.with_(S=1), pr)  # compile outside the timed region
t0 = time.perf_counter()
run_bvr_l_psgd(cfg, pr)
print(time.perf_counter() - t0)
"""


def _inputs(rows, rng):
    X = rng.standard_normal((rows, D_IN))
    y = rng.integers(0, C, rows)
    x_mlp = 0.1 * rng.standard_normal(kernels.mlp_num_params(D_IN, HIDDEN, C))
    x_sm = 0.1 * rng.standard_normal(kernels.softmax_num_params(D_IN, C))
    U = rng.standard_normal((rows, 20))
    w = np.where(np.arange(rows) % 2, -1.0, 1.0)
    return {
        "mlp_loss_grad": (x_mlp, X, y, D_IN, HIDDEN, C),
        "softmax_loss_grad": (x_sm, X, y, D_IN, C),
        "quartic_noise_grad": (rng.standard_normal(20), U, w),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    out = []
    for rows in ROWS:
        args = _inputs(rows, rng)
        for name, a in args.items():
            row = {"kernel": name, "rows": rows}
            for path, table in (("numpy", kernels.NUMPY_KERNELS), ("numba", kernels.JIT_KERNELS)):
                if path == "numba" and not NUMBA_AVAILABLE:
                    continue
                f = table[name]
                f(*a)  # warm up / compile
                row[path] = min(timeit.repeat(lambda: f(*a), number=repeat, repeat=3)) / repeat * 1e6
            out.append(row)
    return out


def bench_end_to_end():
    res = {}
    for label, env in (("default", {}), ("BVRLP_DISABLE_JIT=1", {"BVRLP_DISABLE_JIT": "1"})):
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-c", E2E], env={**os.environ, **env},
                              capture_output=True, text=True, check=True)
        res[label] = {"run_seconds": float(proc.stdout.strip()), "wall_seconds": time.perf_counter() - t0}
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json")
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)

    print(f"backend in this process: {BACKEND}; numba available: {NUMBA_AVAILABLE}; "
          f"numba row limits per kernel: {kernels.JIT_MAX_ROWS}")
    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<20}{'rows':>6}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for r in rows:
        nb = r.get("numba", float("nan"))
        print(f"{r['kernel']:<20}{r['rows']:>6}{r['numpy']:>12.1f}{nb:>12.1f}{r['numpy'] / nb:>9.2f}")
    result = {"kernels": rows, "backend": BACKEND}
    if not args.skip_e2e:
        e2e = bench_end_to_end()
        result["end_to_end"] = e2e
        print("10-round MLP run (P=8, K=64, b=16):")
        for label, v in e2e.items():
            print(f"  {label:<22}{v['run_seconds']:.2f}s run, {v['wall_seconds']:.2f}s with startup")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2)
    return result


if __name__ == "__main__":
    main()

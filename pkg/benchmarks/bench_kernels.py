#!/usr/bin/env python3
"""Compare the numba and numpy kernel backends.

Usage:
    python benchmarks/bench_kernels.py [--repeat N]

Part 1 times each kernel flavour directly on training-sized arrays.
Part 2 times one fedhkd seed end to end in two subprocesses, one per
``FEDHKD_NUMBA`` setting, and checks that both reach the same accuracy.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from fedhkd import _kernels as K

E2E = r"""
import json, time
from fedhkd import BACKEND
from fedhkd.harness import parse_config, run_seed
cfg = parse_config(overrides={"clients": 8, "rounds": 10, "batch_size": 32, "checkpoint": False})
run_seed(parse_config(overrides={"clients": 8, "rounds": 1, "checkpoint": False}), 0)  # warm-up / JIT
t0 = time.perf_counter()
metrics, _ = run_seed(cfg, 0)
print(json.dumps({"backend": BACKEND, "seconds": time.perf_counter() - t0,
                  "global_acc": metrics[-1].global_acc}))
"""


def timeit(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e6


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 8))
    scale, shift = np.ones(8), np.zeros(8)
    out, xhat, _, _, inv_std = K.bn_forward_np(x, scale, shift, 1e-5)
    z = rng.normal(size=(32, 10))
    p = rng.normal(size=(16, 32))
    g = rng.normal(size=p.shape)
    stack = rng.normal(size=(8, 16, 32))
    w = np.full(8, 1 / 8)
    labels = rng.integers(0, 10, size=200)
    vals = rng.normal(size=(200, 8))

    cases = {
        "softmax_rows": (lambda f: f(z, 2.0), K.softmax_rows_np, K.softmax_rows_nb),
        "bn_forward": (lambda f: f(x, scale, shift, 1e-5), K.bn_forward_np, K.bn_forward_nb),
        "bn_backward": (lambda f: f(x, xhat, scale, inv_std), K.bn_backward_np, K.bn_backward_nb),
        "adam_update": (lambda f: f(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                    1e-3, 0.5, 0.999, 1e-8, 0.5, 0.001),
                        K.adam_update_np, K.adam_update_nb),
        "weighted_sum": (lambda f: f(stack, w), K.weighted_sum_np, K.weighted_sum_nb),
        "class_sums": (lambda f: f(vals, labels, 10), K.class_sums_np, K.class_sums_nb),
    }
    print(f"{'kernel':<14}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (call, f_np, f_nb) in cases.items():
        t_np = timeit(lambda: call(f_np), repeat)
        t_nb = timeit(lambda: call(f_nb), repeat)
        print(f"{name:<14}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>10.2f}")


def end_to_end():
    results = []
    for flag in ("0", "1"):
        env = dict(os.environ, FEDHKD_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True,
                             text=True, check=True)
        results.append(json.loads(res.stdout.strip().splitlines()[-1]))
    for r in results:
        print(f"{r['backend']:<8} 10 rounds x 8 clients: {r['seconds']:.2f}s  "
              f"global acc {r['global_acc']:.4f}")
    if abs(results[0]["global_acc"] - results[1]["global_acc"]) > 0.02:
        print("warning: backends disagree on accuracy by more than 2 points")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    kernel_table(args.repeat)
    if not args.skip_e2e:
        print()
        end_to_end()


if __name__ == "__main__":
    main()

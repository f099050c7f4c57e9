"""Compare the numba kernels with their numpy fallbacks.

Kernel timings call both implementations in-process.  The end-to-end row
runs a short MLP training job once per backend in a subprocess, because the
backend is fixed at import time by ``SPARSECL_DISABLE_NUMBA``.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sparsecl import _accel

_TRAIN_SNIPPET = """
import time
from sparsecl import TrainConfig, build_synthetic_tasks, run_experiment
from sparsecl._accel import BACKEND
stream = build_synthetic_tasks(T=2, dim=784, n_per_class=100, seed=0)
cfg = TrainConfig(method="sparcl-er", epochs=5, buffer=100, seed=0)
run_experiment(cfg, stream)  # warm-up (jit compile)
t = time.perf_counter()
run_experiment(cfg, stream)
print(BACKEND, time.perf_counter() - t)
"""


def _best(fn, repeat):
    fn()  # warm-up, includes jit compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    xp = rng.random((32, 8, 30, 30)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    b = np.zeros(16, np.float32)
    dout = rng.standard_normal((32, 16, 28, 28)).astype(np.float32)
    big_w = rng.standard_normal((256, 784)).astype(np.float32)
    big_g = rng.standard_normal((256, 784)).astype(np.float32)
    mask = rng.random((256, 784)) < 0.25
    counts = np.zeros(60_000, np.int64)
    ids = rng.choice(60_000, 4096, replace=False)
    pred, lab = rng.integers(0, 10, 4096), rng.integers(0, 10, 4096)
    return {
        "conv2d_forward": (lambda f: f(xp, w, b, 1), "conv2d_forward"),
        "conv2d_backward": (lambda f: f(xp, w, dout, 1), "conv2d_backward"),
        "masked_sgd": (lambda f: f(big_w.copy(), big_g, mask, 0.01), "masked_sgd"),
        "count_wrong": (lambda f: f(counts, ids, pred, lab), "count_wrong"),
    }


def end_to_end():
    out = {}
    for flag in ("0", "1"):
        env = {**os.environ, "SPARSECL_DISABLE_NUMBA": flag}
        code = _TRAIN_SNIPPET
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results to this file")
    ap.add_argument("--skip-train", action="store_true", help="kernels only")
    args = ap.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for name, (call, base) in kernel_cases(rng).items():
        t_np = _best(lambda: call(getattr(_accel, base + "_np")), args.repeat)
        t_nb = _best(lambda: call(getattr(_accel, base + "_nb")), args.repeat)
        rows.append({"case": name, "numpy_s": t_np, "numba_s": t_nb})
    if not args.skip_train:
        try:
            t = end_to_end()
            rows.append({"case": "train_mlp", "numpy_s": t["numpy"], "numba_s": t["numba"]})
        except subprocess.CalledProcessError as exc:
            print(f"end-to-end run failed: {exc.stderr.strip()}", file=sys.stderr)
    print(f"{'case':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}")
    for r in rows:
        print(f"{r['case']:<18}{1e3 * r['numpy_s']:>12.2f}{1e3 * r['numba_s']:>12.2f}"
              f"{r['numpy_s'] / r['numba_s']:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Time the hot kernels under the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The numba path is compiled once before timing.  Results go to stdout as CSV.
"""

import argparse
import csv
import sys
import time

import numpy as np

from spcot import _kernels as K
from spcot import data as D
from spcot import engine as E


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile on first use)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    x1 = rng.uniform(size=(6, 1, 32, 32))
    w1 = rng.normal(size=(8, 1, 3, 3))
    x2 = rng.normal(size=(6, 8, 32, 32))
    w2 = rng.normal(size=(8, 8, 3, 3))
    b = np.zeros(8)
    g = rng.normal(size=(6, 8, 32, 32))
    a = np.argwhere(rng.uniform(size=(32, 32)) < 0.3)
    c = np.argwhere(rng.uniform(size=(32, 32)) < 0.3)
    ds = D.generate(0, n=40, hw=32, labeled_ratio=0.1, n_test=4)
    cfg = E.TrainConfig(epochs=1, iters_per_epoch=20, warmup_epochs=0)
    return {
        "conv_fwd_1to8": lambda: K.conv2d_forward(x1, w1, b),
        "conv_fwd_8to8": lambda: K.conv2d_forward(x2, w2, b),
        "conv_bwd_8to8": lambda: K.conv2d_backward(x2, w2, g, True),
        "conv_bwd_1to8_no_dx": lambda: K.conv2d_backward(x1, w1, g, False),
        "hausdorff_32x32": lambda: K.directed_sq_hausdorff(a, c),
        "train_20_iters": lambda: E.train(cfg, ds),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    results = {}
    prev = K.get_backend()
    try:
        for be in backends:
            K.set_backend(be)
            for name, fn in cases().items():
                reps = max(1, args.repeat // 10) if name.startswith("train") else args.repeat
                results[(name, be)] = best_of(fn, reps)
    finally:
        K.set_backend(prev)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["case", *(f"{b}_ms" for b in backends), "speedup"])
    for name in cases():
        row = [results[(name, b)] * 1e3 for b in backends]
        speed = row[0] / row[-1] if len(row) > 1 else 1.0
        out.writerow([name, *(f"{v:.3f}" for v in row), f"{speed:.2f}"])


if __name__ == "__main__":
    main()

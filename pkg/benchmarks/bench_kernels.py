"""Compare the numba and numpy kernels on the rasterize + score workload.

Runs both backends in the same process by calling the ``*_nb`` and ``*_np``
kernels directly, checks that they produce identical bytes, and prints
per-kernel timings plus the end-to-end time for N synthetic 224x224 examples.

    python3 benchmarks/bench_kernels.py --examples 10000
"""
import argparse
import time

import numpy as np

from tempeo import _accel, kernels
from tempeo.geom import Polygon, min_aabb


def make_examples(n, seed=0, size=224):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        polys = []
        for _ in range(int(rng.integers(1, 10))):
            k = int(rng.integers(4, 9))
            ang = np.sort(rng.uniform(0, 2 * np.pi, k))
            rad = rng.uniform(4, 20, k)
            cx, cy = rng.uniform(25, size - 25, 2)
            polys.append(Polygon(np.c_[cx + rad * np.cos(ang), cy + rad * np.sin(ang)]))
        out.append(polys)
    return out


def run(examples, fill, counts, size=224):
    tp = fp = fn = 0
    gt = np.zeros((size, size), np.uint8)
    pred = np.zeros((size, size), np.uint8)
    for polys in examples:
        gt[:] = 0
        pred[:] = 0
        for p in polys:
            xs, ys, starts = p.flat()
            fill(gt, xs, ys, starts, np.uint8(1))
            b = min_aabb(p)
            kernels.fill_box(pred, b.x_min, b.y_min, b.x_max, b.y_max, 1)
        a, b_, c = counts(pred, gt)
        tp, fp, fn = tp + a, fp + b_, fn + c
    return tp, fp, fn


def timed(fn, *args, repeat=1):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    examples = make_examples(args.examples, args.seed)
    backends = [("numpy", kernels.fill_polygon_np, kernels.binary_counts_np)]
    if _accel.HAVE_NUMBA:
        # first call compiles (or loads the on-disk cache); keep it out of the timings
        run(examples[:2], kernels.fill_polygon_nb, kernels.binary_counts_nb)
        backends.insert(0, ("numba", kernels.fill_polygon_nb, kernels.binary_counts_nb))
    else:
        print("numba not installed; timing the numpy kernels only")

    results = {}
    for name, fill, counts in backends:
        secs, cnt = timed(run, examples, fill, counts, repeat=args.repeat)
        results[name] = (secs, cnt)
        tp, fp, fn = cnt
        f1 = 2 * tp / (2 * tp + fp + fn)
        print(f"{name:6s} {secs:8.3f} s  {args.examples / secs:10.1f} ex/s  F1={f1:.6f}")
    if len(results) == 2:
        assert results["numba"][1] == results["numpy"][1], "backends disagree"
        print(f"speed-up numba/numpy: {results['numpy'][0] / results['numba'][0]:.2f}x")
    print(f"active backend: {_accel.backend_name()}")


if __name__ == "__main__":
    main()

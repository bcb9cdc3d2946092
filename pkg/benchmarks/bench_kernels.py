"""Time the compiled kernels against their NumPy twins.

    python benchmarks/bench_kernels.py [--size 48] [--repeat 3]

Prints one row per kernel: best-of-N wall time for each implementation and
the speedup. Both implementations run on the same inputs.
"""
import argparse
import timeit

import numpy as np
from scipy.ndimage import binary_dilation

from atlasfuse import _kernels


def cases(n, rng):
    vol = rng.random((n, n, n))
    fixed = rng.random((n, n, n))
    M = np.zeros((3, 4))
    M[:, :3] = np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))
    M[:, 3] = rng.uniform(-1, 1, 3)
    disp = rng.uniform(-1, 1, (3, n, n, n))
    r = rng.standard_normal((n, n, n))
    pts = np.ascontiguousarray(rng.uniform(0, n - 1, (n ** 3, 3)))
    blobs = np.ascontiguousarray(rng.random((n, n, n)) < 0.3, dtype=np.uint8)
    lines = np.where(rng.random((n * n, n)) < 0.1, 0.0, np.inf)
    m = n // 2
    solid = np.ascontiguousarray(binary_dilation(rng.random((m, m, m)) < 0.02, iterations=3), dtype=np.uint8)
    return {
        "sample_points": lambda k: k.sample_points(vol, pts),
        "warp_sample": lambda k: k.warp_sample(vol, M, disp, fixed.shape),
        "warp_backprop": lambda k: k.warp_backprop(vol, M, disp, r, True),
        "mse_backprop": lambda k: k.mse_backprop(vol, fixed, M, disp, True),
        "edt_sq_lines": lambda k: k.edt_sq_lines(lines.copy(), 1.0),
        "label_components": lambda k: k.label_components(blobs, 26),
        f"thin3d ({m}^3)": lambda k: k.thin3d(solid),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _kernels.compiled is None:
        raise SystemExit("compiled extension not available; build it with `python setup.py build_ext --inplace`")
    rng = np.random.default_rng(0)
    print(f"volume {args.size}^3, best of {args.repeat}")
    print(f"{'kernel':<22}{'cython s':>11}{'python s':>11}{'speedup':>9}")
    for name, fn in cases(args.size, rng).items():
        tc = best(lambda: fn(_kernels.compiled), args.repeat)
        tp = best(lambda: fn(_kernels.python), args.repeat)
        print(f"{name:<22}{tc:>11.4f}{tp:>11.4f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()

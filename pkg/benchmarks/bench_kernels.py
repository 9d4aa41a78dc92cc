"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run once per backend to warm up (JIT compilation for numba),
then timed as the best of ``--repeat`` runs. Outputs are checked for
equality across backends before timing is reported.
"""

import argparse
import timeit

import numpy as np

from tofloc import _accel, kernels
from tofloc.localization import rasterize, score_rects
from tofloc.pointcloud import SpatialIndex


def _cases():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 2, (20_000, 3))
    index = SpatialIndex(pts, 0.1)
    planes = rng.normal(size=(500, 4))
    planes[:, :3] /= np.linalg.norm(planes[:, :3], axis=1, keepdims=True)
    fp = rng.uniform([-0.45, -1.0], [0.45, 1.0], (5000, 2))
    grid = rasterize(fp, 0.05, 1, 1.5)
    n = 20_000
    cand = (rng.normal(0, 0.3, n), rng.normal(0, 0.3, n), rng.uniform(0, np.pi, n),
            np.full(n, 0.9), np.full(n, 2.0))
    return {
        "knn (20k pts, 20k queries, k=10)": lambda: index.query(pts, 0.1, 10)[0],
        "count_inliers (20k pts, 500 planes)": lambda: kernels.count_inliers(pts, planes, 0.02),
        "score_rects overlap (20k rects)": lambda: score_rects(grid, *cand, "overlap"),
        "score_rects center (20k rects)": lambda: score_rects(grid, *cand, "center"),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in _cases().items():
        times, outs = [], []
        for b in backends:
            with _accel.using_backend(b):
                outs.append(fn())
                times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)))
        assert all(np.array_equal(outs[0], o) for o in outs[1:]), f"backends disagree on {name}"
        row = f"{name:40s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()

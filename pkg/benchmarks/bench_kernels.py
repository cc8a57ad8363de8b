"""Time the numba kernels against the numpy fallback and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from ovpseudo import _accel, kernels, preprocess


def timeit(fn, repeat):
    fn()  # warm-up, includes JIT compilation on the numba path
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    img = rng.integers(0, 256, size=(480, 640, 3), dtype=np.uint8)
    masks = rng.random((64, 96 * 128)) < 0.3
    boxes = np.column_stack([rng.uniform(0, 200, 60), rng.uniform(0, 200, 60),
                             rng.uniform(210, 400, 60), rng.uniform(210, 400, 60)])
    iou = rng.random((400, 150))
    ignore = rng.random(150) < 0.1
    return {
        "gaussian_blur 640x480": lambda: preprocess.gaussian_blur(img),
        "mask_intersections 64x12288": lambda: kernels.mask_intersections(masks),
        "union_area_in 60 boxes": lambda: kernels.union_area_in((50.0, 50.0, 350.0, 350.0), boxes),
        "greedy_assign 400x150": lambda: kernels.greedy_assign(iou, ignore, 0.5),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  same")
    for name, fn in cases(rng).items():
        _accel.set_numba(False)
        ref = fn()
        t_np = timeit(fn, args.repeat)
        _accel.set_numba(True)
        out = fn()
        t_nb = timeit(fn, args.repeat)
        same = all(np.array_equal(a, b) for a, b in zip(ref, out)) if isinstance(ref, tuple) \
            else np.array_equal(ref, out)
        print(f"{name:<30} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x  {same}")


if __name__ == "__main__":
    main()

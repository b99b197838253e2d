"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The numba timings exclude the first (compiling) call. With
EQUIADA_DISABLE_NUMBA=1 only the numpy column is printed.
"""

import argparse
import timeit

import numpy as np

from equiada import _kernels as K


def cases(rng):
    # segment_sum at the size of a batched edge aggregation: 32 graphs x 20 edges x 12 frames x 32 hidden
    msgs = rng.standard_normal((640, 12, 32))
    index = rng.integers(0, 160, 640)
    pos = rng.uniform(-1, 1, (5, 3))
    vel = 0.5 * rng.standard_normal((5, 3))
    q = rng.choice([-1.0, 1.0], 5)
    yield "segment_sum 640x12x32 -> 160", K.segment_sum_numpy, K.segment_sum, (msgs, index, 160)
    yield "coulomb_forces N=5", K.coulomb_forces_numpy, K.coulomb_forces, (pos, q, 1.0, 0.1)
    yield "leapfrog N=5, 12 frames x 100 steps", K.leapfrog_numpy, K.leapfrog, (pos, vel, q, 1.0, 0.1, 1e-3, 12, 100)


def best_of(fn, args, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba active: {K.USING_NUMBA}")
    print(f"{'kernel':40s} {'numpy':>12s} {'numba':>12s} {'speedup':>8s}")
    for name, np_fn, fast_fn, fargs in cases(rng):
        ref = np_fn(*fargs)
        t_np = best_of(np_fn, fargs, args.repeat)
        if not K.USING_NUMBA:
            print(f"{name:40s} {t_np * 1e6:10.1f}us {'-':>12s} {'-':>8s}")
            continue
        out = fast_fn(*fargs)  # compile
        err = max(float(np.abs(np.asarray(a) - np.asarray(b)).max()) for a, b in zip(_as_tuple(ref), _as_tuple(out)))
        t_nb = best_of(fast_fn, fargs, args.repeat)
        print(f"{name:40s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us {t_np / t_nb:7.1f}x  (max diff {err:.1e})")


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


if __name__ == "__main__":
    main()

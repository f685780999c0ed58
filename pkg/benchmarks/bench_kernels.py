"""Wall-clock comparison of the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 5]

Each kernel is run once before timing so numba compilation is excluded.
Outputs are cross-checked before anything is timed.
"""
import argparse
import time

import numpy as np

from structprune import _accel


def best_of(fn, repeats):
    fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.normal(size=(64, 32, 16, 16))
    yield "im2col 64x32x16x16 k3", lambda k: k.im2col(x, 3, 1, 1)
    cols = rng.normal(size=(64, 32 * 9, 256))
    yield "col2im 64x32x16x16 k3", lambda k: k.col2im(cols, x.shape, 3, 1, 1)
    proj = rng.normal(size=(500, 10, 256))
    z = rng.normal(size=(500, 10))
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    yield "gn_accumulate N=500 D=10 S=256", lambda k: k.gn_accumulate(proj, probs)
    a = rng.uniform(size=(1024, 1024))
    q = a + a.T
    layer_of = np.repeat(np.arange(8), 128)
    lim = np.full(8, 120)
    yield "greedy S=1024 m=512", lambda k: k.greedy_select(q, 512, layer_of, lim)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if _accel.NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for name, fn in cases(rng):
        a, b = fn(_accel.NUMPY_KERNELS), fn(_accel.NUMBA_KERNELS)
        if isinstance(a, tuple):
            assert all(np.array_equal(u, v) for u, v in zip(a, b)), name
        else:
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)
        t_np = best_of(lambda: fn(_accel.NUMPY_KERNELS), args.repeats)
        t_nb = best_of(lambda: fn(_accel.NUMBA_KERNELS), args.repeats)
        print(f"{name:34s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()

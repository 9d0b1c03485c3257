"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Shapes mirror the frozen-backbone harness: a stack of 128 sequences of
12 tokens (softmax over 12-wide rows) and 4 attention maps mixed by a
4 x 4 coefficient.  The first numba call (compilation, or a cache load)
is excluded.
"""

import argparse
import timeit

import numpy as np

from coefflab import _kernels as K


def cases(rng):
    logits = rng.normal(size=(128 * 12, 12))
    y = K.softmax_rows_numpy(logits)
    gy = rng.normal(size=y.shape)
    coeff = rng.normal(size=(4, 4))
    atoms = rng.normal(size=(4, 128 * 12 * 12))
    g = rng.normal(size=atoms.shape)
    return {
        "softmax_rows": ((logits,), K.softmax_rows_numpy, getattr(K, "softmax_rows_numba", None)),
        "softmax_rows_grad": ((y, gy), K.softmax_rows_grad_numpy, getattr(K, "softmax_rows_grad_numba", None)),
        "mix": ((coeff, atoms), K.mix_numpy, getattr(K, "mix_numba", None)),
        "mix_grad": ((coeff, atoms, g), K.mix_grad_numpy, getattr(K, "mix_grad_numba", None)),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"selected backend: {K.BACKEND}")
    print(f"{'kernel':20s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (a, f_np, f_nb) in cases(rng).items():
        t_np = best_of(f_np, a, args.repeat)
        if f_nb is None:
            print(f"{name:20s} {t_np * 1e6:10.1f} {'n/a':>10s}")
            continue
        f_nb(*a)  # warm-up
        t_nb = best_of(f_nb, a, args.repeat)
        r_np, r_nb = f_np(*a), f_nb(*a)
        if isinstance(r_np, tuple):
            diff = max(float(np.max(np.abs(x - y))) for x, y in zip(r_np, r_nb))
        else:
            diff = float(np.max(np.abs(r_np - r_nb)))
        print(f"{name:20s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()

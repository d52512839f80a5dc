"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow the reference network on 56x56 inputs with batch 64.  Each
kernel is checked for bitwise agreement before it is timed.
"""
import argparse
import timeit

import numpy as np

from ecloss import _kernels as K
from ecloss._kernels import python_backend as PY


def cases(rng):
    x1 = rng.normal(size=(64, 1, 56, 56))
    x2 = rng.normal(size=(64, 8, 28, 28))
    pool_in = rng.normal(size=(64, 8, 56, 56))
    cols2 = PY.im2col(x2, 3, 1, 1)
    _, arg = PY.maxpool_forward(pool_in, 2, 2)
    dpool = rng.normal(size=(64, 8, 28, 28))
    maps = [rng.normal(size=(56, 56)).cumsum(0).cumsum(1) for _ in range(16)]
    return [
        ("im2col 64x1x56x56 k3", lambda b: b.im2col(x1, 3, 1, 1)),
        ("im2col 64x8x28x28 k3", lambda b: b.im2col(x2, 3, 1, 1)),
        ("col2im 64x8x28x28 k3", lambda b: b.col2im(cols2, x2.shape, 3, 1, 1)),
        ("maxpool fwd 64x8x56x56", lambda b: b.maxpool_forward(pool_in, 2, 2)),
        ("maxpool bwd 64x8x56x56", lambda b: b.maxpool_backward(dpool, arg, pool_in.shape)),
        ("prominence 16 maps 56x56", lambda b: [b.peak_prominences(m) for m in maps]),
    ]


def same(a, b):
    if isinstance(a, (tuple, list)):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if K.compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases(rng):
        assert same(fn(PY), fn(K.compiled_backend)), f"backends disagree on {name}"
        t_py = min(timeit.repeat(lambda: fn(PY), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(K.compiled_backend), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{t_py:>12.2f}{t_c:>14.2f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()

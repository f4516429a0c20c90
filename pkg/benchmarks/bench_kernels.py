"""Time the compiled reduction kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat R]``. Both backends
are checked for bit-identical output before timing.
"""
import argparse
import timeit

import numpy as np

from mfgflow import _kernels_py as pure

try:
    from mfgflow import _kernels as compiled
except ImportError:
    compiled = None

CASES = {
    "tree_sum": [((20000, 4),), ((200000, 1),), ((5000, 64),)],
    "pair_contract": [((64, 512, 1, 1), (512, 1, 1)), ((256, 512, 1, 1), (512, 1, 32)),
                      ((64, 256, 2, 2), (256, 2, 8))],
}


def _inputs(name, shapes, rng):
    return [rng.standard_normal(s) for s in shapes]


def _time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    if compiled is None:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'kernel':<14} {'shapes':<34} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, cases in CASES.items():
        for shapes in cases:
            data = _inputs(name, shapes, rng)
            tp = _time(getattr(pure, name), data, args.repeat)
            label = " x ".join(str(s) for s in shapes)
            if compiled is None:
                print(f"{name:<14} {label:<34} {tp * 1e3:>10.3f} {'-':>12} {'-':>8}")
                continue
            fc = getattr(compiled, name)
            if not np.array_equal(fc(*data), getattr(pure, name)(*data)):
                raise SystemExit(f"{name}: backends disagree on {label}")
            tc = _time(fc, data, args.repeat)
            print(f"{name:<14} {label:<34} {tp * 1e3:>10.3f} {tc * 1e3:>12.3f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()

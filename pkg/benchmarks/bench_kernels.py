"""Time the numba and numpy kernel backends on Y-Net-sized problems.

    python benchmarks/bench_kernels.py [--reps 20] [--threads 1]

Prints one line per kernel and shape with the median time of each backend
and the numpy/numba ratio, and checks both backends agree.
"""

import argparse
import statistics
import time

import numpy as np

from y2net import _kernels

# (label, batch*frames, M_in, C_in, C_out, stride)
CASES = [
    ("enc1 F=70 1 frame", 1, 260, 4, 70, 1),
    ("enc4 F=70 1 frame", 1, 130, 140, 140, 2),
    ("lstm-h F=70 1 frame", 1, 65, 70, 280, 1),
    ("enc2 F=8 train", 800, 260, 8, 8, 2),
    ("dec3 F=8 train", 800, 130, 16, 8, 1),
]
N = 24


def timeit(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    _kernels.set_threads(args.threads)
    if "numba" not in _kernels.IMPLS:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<11} {'case':<22} {'numpy ms':>9} {'numba ms':>9} {'np/nb':>6}")
    for label, b, m_in, ci, co, s in CASES:
        m_out = -(-m_in // s)
        mp = (m_out - 1) * s + N
        xpad = rng.standard_normal((b, mp, ci)).astype(np.float32)
        w = rng.standard_normal((N, ci, co)).astype(np.float32)
        g = rng.standard_normal((b, m_out, co)).astype(np.float32)
        calls = {
            "conv_fwd": lambda k: k["conv_fwd"](xpad, w, s, m_out),
            "conv_wgrad": lambda k: k["conv_wgrad"](xpad, g, s, N),
            "conv_igrad": lambda k: k["conv_igrad"](g, w, s, mp),
        }
        for name, call in calls.items():
            a, c = call(_kernels.IMPLS["numpy"]), call(_kernels.IMPLS["numba"])
            # float32 reductions over ~1e5 terms: compare relative to the output scale
            if np.abs(a - c).max() > 1e-4 * np.abs(a).max():
                raise SystemExit(f"backends disagree on {name} / {label}")
            t_np = timeit(lambda: call(_kernels.IMPLS["numpy"]), args.reps)
            t_nb = timeit(lambda: call(_kernels.IMPLS["numba"]), args.reps)
            print(f"{name:<11} {label:<22} {t_np * 1e3:9.3f} {t_nb * 1e3:9.3f} {t_np / t_nb:6.2f}")
    x = rng.standard_normal(160000)
    for name in ("dc_block", "one_pole"):
        t_np = timeit(lambda: _kernels.IMPLS["numpy"][name](x, 0.99), args.reps)
        t_nb = timeit(lambda: _kernels.IMPLS["numba"][name](x, 0.99), args.reps)
        print(f"{name:<11} {'10 s signal':<22} {t_np * 1e3:9.3f} {t_nb * 1e3:9.3f} {t_np / t_nb:6.2f}")


if __name__ == "__main__":
    main()

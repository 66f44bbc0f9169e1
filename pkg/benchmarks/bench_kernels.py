"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py            # full sizes
    python3 benchmarks/bench_kernels.py --quick    # small sizes, a few seconds

Prints one row per kernel with the best-of-``--repeat`` wall time of each
backend, the speedup and the largest absolute difference between outputs.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from globalvol import kernels


def cases(quick: bool):
    rng = np.random.default_rng(0)
    T = 1000 if quick else 4000
    N = 8 if quick else 64
    B, H = (8, 8) if quick else (64, 16)
    Tb = 500 if quick else 2000
    eps = rng.standard_normal(T)
    y = rng.standard_normal((N, T))
    lengths = np.full(N, T, dtype=np.int64)
    s1 = np.ones(N)
    theta = np.array([0.05, 0.1, 0.85, 0.0])
    L = rng.standard_normal((Tb, 3))
    n_boot = 100 if quick else 1000
    u = rng.random((n_boot, Tb))
    starts = rng.integers(0, Tb, size=(n_boot, Tb), dtype=np.int64)
    yield "garch_simulate", lambda k: k.garch_simulate(kernels.KIND_GARCH, 0.05, 0.1, 0.85, 0.0, 1.0, eps)
    yield "garch_variance", lambda k: k.garch_variance(kernels.KIND_GJR, 0.05, 0.05, 0.85, 0.1, eps, 1.0)
    yield "garch_nll_grad", lambda k: k.garch_nll_grad(kernels.KIND_GARCH, theta, y, lengths, s1)
    for arch, g in (("rnn", 1), ("gru", 3), ("lstm", 4)):
        xp = rng.standard_normal((T, B, g * H)) * 0.5
        w = rng.standard_normal((H, g * H)) / np.sqrt(H)
        fwd = getattr(kernels.get_backend("python"), f"{arch}_scan_forward")(xp, w)
        dhs = rng.standard_normal((T, B, H))
        yield f"{arch}_scan_forward", (lambda a, x, w_: lambda k: getattr(k, f"{a}_scan_forward")(x, w_))(arch, xp, w)
        if arch == "rnn":
            args = (w, fwd, dhs)
        elif arch == "gru":
            args = (w, fwd[0], fwd[1], dhs)
        else:
            args = (w, fwd[0], fwd[1], fwd[2], dhs)
        yield f"{arch}_scan_backward", (lambda a, ar: lambda k: getattr(k, f"{a}_scan_backward")(*ar))(arch, args)
    yield "stationary_bootstrap", lambda k: k.stationary_bootstrap_means(L, u, starts, 0.1)


def max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_diff(x, z) for x, z in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the NumPy fallback is available")
    mods = {b: kernels.get_backend(b) for b in backends}
    print(f"{'kernel':24s}" + "".join(f"{b + ' [ms]':>14s}" for b in backends) + f"{'speedup':>10s}{'max diff':>11s}")
    for name, fn in cases(args.quick):
        times, outs = {}, {}
        for b, mod in mods.items():
            outs[b] = fn(mod)
            times[b] = 1e3 * min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{name:24s}" + "".join(f"{times[b]:14.2f}" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['cython']:9.1f}x{max_diff(outs['python'], outs['cython']):11.1e}"
        print(row)


if __name__ == "__main__":
    main()

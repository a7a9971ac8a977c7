"""Compare the compiled inference kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--tasks 100] [--dim 128] [--steps 10] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from efagg import kernels
from efagg.taskgen import make_eval_set


def make_inputs(n_tasks, dim, seed=0):
    rng = np.random.default_rng(seed)
    counts = np.array([t.n_context for t in make_eval_set("rbf", n_tasks, seed)])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n = int(offsets[-1])
    return rng.normal(size=(n, dim)), rng.uniform(0.05, 2.0, (n, dim)), offsets


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tasks", type=int, default=100)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "compiled":
        print("compiled extension not available; only the fallback can be timed")
    m, v, off = make_inputs(args.tasks, args.dim)
    x = np.random.default_rng(1).uniform(-2, 2, 50)
    cases = {
        "ba": lambda impl: kernels.ba_batch(m, v, off, 0.0, 1.0, impl=impl),
        f"rba ({args.steps} sweeps)": lambda impl: kernels.rba_batch(
            m, v, off, 1e-6 * args.dim, 1e-6 * args.dim, 1e-2 * args.dim, args.steps, impl=impl),
        f"rba + bound ({args.steps} sweeps)": lambda impl: kernels.rba_batch(
            m, v, off, 1e-6 * args.dim, 1e-6 * args.dim, 1e-2 * args.dim, args.steps, True, impl=impl),
        "gram rbf (50 pts)": lambda impl: kernels.gram_rbf(x, 0.8, 0.3, impl=impl),
        "gram matern (50 pts)": lambda impl: kernels.gram_matern52(x, impl=impl),
    }
    backends = ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    print(f"{args.tasks} tasks, {len(m)} points, D={args.dim}; best of {args.repeat}, ms per call")
    print(f"{'kernel':<28}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases.items():
        times = []
        for b in backends:
            impl = kernels.implementation(b)
            fn(impl)
            number = 3
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
            times.append(best * 1e3)
        line = f"{name:<28}" + "".join(f"{t:>12.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()

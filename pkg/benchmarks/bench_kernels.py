"""Time the QoI kernels with and without numba.

    python benchmarks/bench_kernels.py --N 20000 --M 50
"""
import argparse
import time

import numpy as np

from romflow import _kernels
from romflow.elliptic import EllipticProblem, kl_eigenpairs


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=20_000)
    ap.add_argument("--M", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    p = EllipticProblem(kl_eigenpairs(1.0, args.M), 0.8)
    xi = np.random.default_rng(0).normal(size=(args.N, args.M))
    f, c = p.disc.fine, p.disc.coarse
    a_f = p.expansion.field(xi, f.nodes.ravel()).reshape(args.N, *f.nodes.shape)
    a_c = p.expansion.field(xi, c.left_endpoints)

    rows = []
    for name, run in (
        ("fine", lambda nb: _kernels.fine_norms(a_f, f.nodes, f.weights, f.integration_matrix, use_numba=nb)),
        ("coarse", lambda nb: _kernels.coarse_norms(a_c, c.left_endpoints, c.h, use_numba=nb)),
    ):
        t_np = best_of(lambda: run(False), args.repeat)
        if _kernels.HAS_NUMBA:
            run(True)  # compile
            t_nb = best_of(lambda: run(True), args.repeat)
        else:
            t_nb = float("nan")
        rows.append((name, t_np, t_nb))

    print(f"N = {args.N}, M = {args.M}")
    print(f"{'kernel':8s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in rows:
        print(f"{name:8s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}")


if __name__ == "__main__":
    main()

"""Time the AGD sweep on the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--sweeps 2000] [--repeats 3]

Prints microseconds per sweep for each backend and hop count, plus the
largest relative loss-trace difference between backends as a sanity check.
"""
import argparse
import time

import numpy as np

from irs_tt import estimators as est, kernels
from irs_tt.analysis import DEFAULT_STEP_BY_D
from irs_tt.system_model import SystemConfig, build_ground_truth, gen_pilots, measure, random_tt_channel


def instance(D, seed=0):
    cfg = SystemConfig(irs_sizes=(10,) * D)
    tt = random_tt_channel(cfg, seed + 1, seed + 2)
    X = gen_pilots(cfg, "gaussian", seed + 3).X
    Y = measure(build_ground_truth(tt), X, cfg.noise_var, seed + 4)
    return cfg, tt, X, Y


def time_backend(backend, D, sweeps, repeats):
    cfg, tt, X, Y = instance(D)
    opts = est.SolverOptions(max_iters=sweeps, step_size=DEFAULT_STEP_BY_D[D], backend=backend)
    best, trace = np.inf, None
    for _ in range(repeats):
        init = est.random_init(cfg.factor_shapes, 7)
        t0 = time.perf_counter()
        res = est.agd_multi(init, tt.phases, X, Y, opts)
        best = min(best, time.perf_counter() - t0)
        trace = res.loss_trace
    return best / sweeps * 1e6, np.asarray(trace)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sweeps", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--hops", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    print(f"{'D':>2} " + " ".join(f"{b + ' us/sweep':>18}" for b in backends) + f" {'speedup':>8} {'max rel diff':>13}")
    for D in args.hops:
        got = {b: time_backend(b, D, args.sweeps, args.repeats) for b in backends}
        line = f"{D:>2} " + " ".join(f"{got[b][0]:18.1f}" for b in backends)
        if len(got) == 2:
            (tc, lc), (tp, lp) = got["cython"], got["python"]
            diff = np.max(np.abs(lc - lp) / np.maximum(np.abs(lp), 1e-300))
            line += f" {tp / tc:8.2f} {diff:13.2e}"
        print(line)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Timing comparison: compiled stepping core vs the pure-numpy fallback.

Runs the weighted adjoint simulation (the training hot loop) and plain
path simulation over a small size grid and prints a table. Both backends
produce bit-identical trajectories; this script also asserts that while
timing.

Usage: python benchmarks/bench_backends.py [--quick]
"""

import argparse
import time

import numpy as np

import bridgeforge as bf
from bridgeforge import integrator


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(label, model, y, grid, n_paths, adjoint, repeats):
    if adjoint:
        adj = bf.build_adjoint(model, 0.0, grid.T)

        def run(force):
            return bf.simulate_adjoint(adj, y, grid, n_paths, seed=7,
                                       _force_generic=force)
    else:
        def run(force):
            return bf.simulate(model, y, grid, n_paths, seed=7,
                               _force_generic=force)

    fast = run(False)
    slow = run(True)
    np.testing.assert_array_equal(fast.states, slow.states)
    np.testing.assert_array_equal(fast.log_weights, slow.log_weights)

    t_fast = time_call(lambda: run(False), repeats)
    t_slow = time_call(lambda: run(True), repeats)
    print(f"{label:38s} {t_slow * 1e3:9.2f} ms {t_fast * 1e3:9.2f} ms "
          f"{t_slow / t_fast:7.1f}x")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true",
                        help="fewer repeats and smaller sizes")
    args = parser.parse_args()
    repeats = 3 if args.quick else 7

    if integrator._core is None:
        raise SystemExit("compiled core is not built; nothing to compare")
    print(f"backend in use: {integrator.BACKEND}")
    print(f"{'case':38s} {'python':>12s} {'compiled':>12s} {'speedup':>8s}")

    cases = [
        ("ou d=1 adjoint N=200 L=100", bf.make_ou(1.0, 1.0, 1),
         np.array([1.0]), bf.TimeGrid(0.0, 1.0, 100), 200, True),
        ("ou d=4 adjoint N=400 L=100", bf.make_ou(1.0, 1.0, 4),
         np.ones(4), bf.TimeGrid(0.0, 1.0, 100), 400, True),
        ("cell adjoint N=200 L=200", bf.make_cell_model(0.1),
         np.array([1.5, 0.2]), bf.TimeGrid(0.0, 2.0, 200), 200, True),
        ("brownian d=2 plain N=2048 L=100", bf.make_brownian(1.0, 2),
         np.zeros(2), bf.TimeGrid(0.0, 1.0, 100), 2048, False),
        ("ou d=1 adjoint N=20000 L=200", bf.make_ou(1.0, 1.0, 1),
         np.array([1.0]), bf.TimeGrid(0.0, 1.0, 200),
         2000 if args.quick else 20000, True),
    ]
    for label, model, y, grid, n, adjoint in cases:
        bench_case(label, model, y, grid, n, adjoint, repeats)


if __name__ == "__main__":
    main()

"""Compare the compiled SSA kernel with the pure-Python fallback.

    python3 benchmarks/bench_ssa.py [--runs N] [--repeat R]

Both kernels consume the same random stream, so each pair of timings
covers identical trajectories; the script checks that before reporting.
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from pepamod import ssa
from pepamod.network import derive_reactions
from pepamod.parser import parse_file

DATA = Path(ssa.__file__).resolve().parent / "data"
CASES = [("module1.biopepa", 30.0), ("module7.biopepa", 300.0), ("composed.biopepa", 30.0)]


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not ssa.COMPILED:
        raise SystemExit("compiled kernel not available; build it with pip install -e .")

    print(f"{'model':<18} {'events':>9} {'compiled s':>11} {'python s':>10} {'speedup':>8}")
    for name, t_end in CASES:
        net = derive_reactions(parse_file(DATA / name))
        a = [ssa.simulate(net, t_end, seed=s) for s in range(args.runs)]
        b = [ssa.simulate(net, t_end, seed=s, pure_python=True) for s in range(args.runs)]
        assert all(np.array_equal(x.times, y.times) and np.array_equal(x.fired, y.fired) for x, y in zip(a, b))
        events = sum(len(x) for x in a)
        fast = best_of(lambda: ssa.ensemble(net, t_end, n_runs=args.runs), args.repeat)
        slow = best_of(lambda: ssa.ensemble(net, t_end, n_runs=args.runs, pure_python=True), args.repeat)
        print(f"{name:<18} {events:>9} {fast:>11.3f} {slow:>10.3f} {slow / fast:>7.1f}x")


if __name__ == "__main__":
    main()

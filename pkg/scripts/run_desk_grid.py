"""Desk-scale sweep: all twelve cases at n = 100, k = 1, 1,000 iterations.

Usage: python3 scripts/run_desk_grid.py [--out DIR] [--iterations N] [--workers W]
"""

import argparse
import time

from metareg import ExperimentPlan, SimulationConfig, run_experiment
from metareg.datagen import CaseSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="desk_grid_out")
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20240521)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cells = [
        SimulationConfig(CaseSpec.from_id(c), n=100, k=1, iterations=args.iterations, seed=args.seed)
        for c in range(1, 13)
    ]
    plan = ExperimentPlan(cells, output_dir=args.out, workers=args.workers)
    t0 = time.perf_counter()
    run_experiment(plan, on_cell=lambda cell: print(cell.summary_line(), flush=True))
    print(f"{len(cells)} cells in {time.perf_counter() - t0:.0f} s; results in {args.out}/")


if __name__ == "__main__":
    main()

"""Full grid: 12 cases x n in {50, 100, 150} x k in {1, 3, 5} at 10,000 iterations.

This is hours of CPU time on one core; use --workers (capped by
METAREG_THREADS) on a larger machine, or --iterations for a lighter pass.
"""

import argparse
import itertools

from metareg import ExperimentPlan, SimulationConfig, run_experiment
from metareg.datagen import COVARIATE_COUNTS, PAPER_ITERATIONS, SAMPLE_SIZES, CaseSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="paper_grid_out")
    ap.add_argument("--iterations", type=int, default=PAPER_ITERATIONS)
    ap.add_argument("--seed", type=int, default=20240521)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--strict-paper", action="store_true")
    args = ap.parse_args()

    cells = [
        SimulationConfig(CaseSpec.from_id(c), n=n, k=k, iterations=args.iterations, seed=args.seed)
        for c, n, k in itertools.product(range(1, 13), SAMPLE_SIZES, COVARIATE_COUNTS)
    ]
    plan = ExperimentPlan(cells, output_dir=args.out, workers=args.workers, strict_paper=args.strict_paper)
    run_experiment(plan, on_cell=lambda cell: print(cell.summary_line(), flush=True))


if __name__ == "__main__":
    main()

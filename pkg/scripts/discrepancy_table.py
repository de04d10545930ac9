"""Per-depth prefix star discrepancy of the four unmasking orders on an n x n grid.

    python scripts/discrepancy_table.py --n 32 --seeds 100
"""

import argparse

import numpy as np

from unimask.samplers import coverage_metrics, halton_order, stratified_order, uniform_order


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--seeds", type=int, default=100)
    args = ap.parse_args()

    depths = range(1, args.n.bit_length())
    rows = {
        "stratified": [coverage_metrics(stratified_order(args.n, np.random.default_rng(s))) for s in range(args.seeds)],
        "uniform": [coverage_metrics(uniform_order(args.n, np.random.default_rng(s))) for s in range(args.seeds)],
        "halton": [coverage_metrics(halton_order(args.n))],
    }
    print("order,depth,prefix,mean_star_discrepancy,mean_coverage,full_coverage_rate")
    for name, reps in rows.items():
        for d in depths:
            disc = np.mean([r.prefix_discrepancy[d] for r in reps])
            cov = np.mean([r.depth_coverage[d] for r in reps])
            full = np.mean([r.depth_coverage[d] == 4 ** d for r in reps])
            print(f"{name},{d},{4 ** d},{disc:.5f},{cov:.2f},{full:.2f}")
    for name, reps in rows.items():
        print(f"# {name}: mean over depths {np.mean([r.star_discrepancy_estimate for r in reps]):.5f}")


if __name__ == "__main__":
    main()

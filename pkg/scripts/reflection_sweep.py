"""Planning and N-round reflection on a trained PLACE checkpoint.

    python scripts/reflection_sweep.py --ckpt runs/place/model.ckpt
"""

import argparse

import numpy as np

from unimask.backbone import load_checkpoint
from unimask.bench import bench_planning, bench_reflection, predictor_for
from unimask.tasks import make_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--rounds", default="1,2,4,8")
    args = ap.parse_args()

    task = make_task("place")
    pred = predictor_for(load_checkpoint(args.ckpt), task)
    plan = bench_planning(pred, task, range(args.seeds))
    print(f"planned {np.mean([r.planned for r in plan]):.3f}  unplanned {np.mean([r.unplanned for r in plan]):.3f}"
          f"  plan-consistent {np.mean([r.plan_consistent for r in plan]):.3f}")

    ns = [int(n) for n in args.rounds.split(",")]
    rows = bench_reflection(pred, task, ns, range(args.seeds))
    print("max_rounds,success,mean_rounds_used")
    for n in ns:
        sel = [r for r in rows if r.max_rounds == n]
        print(f"{n},{np.mean([r.success for r in sel]):.3f},{np.mean([r.rounds_used for r in sel]):.3f}")


if __name__ == "__main__":
    main()

"""Quality of each unmasking order across step counts on a trained checkpoint.

    python scripts/sampler_study.py --ckpt runs/grid_pattern/model.ckpt --task grid_pattern
"""

import argparse

import numpy as np
from scipy import stats

from unimask.backbone import load_checkpoint
from unimask.bench import bench_samplers, predictor_for
from unimask.tasks import make_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--task", default="grid_pattern")
    ap.add_argument("--steps", default="1,4,8,16,64")
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--temperature", type=float, default=1.0)
    args = ap.parse_args()

    task = make_task(args.task)
    pred = predictor_for(load_checkpoint(args.ckpt), task)
    samplers = ["stratified", "halton", "uniform", "confidence"]
    steps = [int(k) for k in args.steps.split(",")]
    rows = bench_samplers(pred, task, samplers, steps, range(args.seeds), n_prompts=1,
                          temperature=args.temperature)
    q = {(s, k): np.array([r.quality for r in rows if r.sampler == s and r.steps == k])
         for s in samplers for k in steps}
    print("steps," + ",".join(samplers) + ",p_stratified_gt_uniform")
    for k in steps:
        diff = q["stratified", k] - q["uniform", k]
        p = stats.wilcoxon(diff, alternative="greater", zero_method="zsplit").pvalue if diff.any() else 1.0
        print(f"{k}," + ",".join(f"{q[s, k].mean():.3f}" for s in samplers) + f",{p:.3g}")


if __name__ == "__main__":
    main()

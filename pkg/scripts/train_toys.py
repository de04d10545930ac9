"""Train every toy model with its recipe and report the eval-loss ratio.

    python scripts/train_toys.py --out runs/ [--tasks grid_pattern,place]
"""

import argparse
import json
import time
from dataclasses import asdict
from pathlib import Path

from unimask.tasks import make_task
from unimask.train import TOY_RECIPES, TrainConfig, train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--tasks", default=",".join(TOY_RECIPES))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("task,steps,initial_eval,final_eval,ratio,seconds")
    for kind in args.tasks.split(","):
        cfg = TrainConfig(seed=args.seed, **TOY_RECIPES[kind])
        out = Path(args.out) / kind
        t0 = time.perf_counter()
        res = train_toy(make_task(kind), cfg, out)
        with open(out / "config.json", "w") as f:
            json.dump({"task": kind, **asdict(cfg)}, f, indent=2, sort_keys=True)
        print(f"{kind},{cfg.steps},{res.initial_eval:.4f},{res.final_eval:.4f},"
              f"{res.final_eval / res.initial_eval:.4f},{time.perf_counter() - t0:.1f}", flush=True)


if __name__ == "__main__":
    main()

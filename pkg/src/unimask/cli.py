"""Command-line entry point: ``unimask <subcommand> [--seed N] [--config file.json] [--out dir]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import backbone as bb
from .bench import (bench_samplers, bench_speed_quality, place_check, planning_config, predictor_for,
                    run_example, write_results, write_timings)
from .diffusion import IncompleteDecodeError
from .grounding import pad_and_normalize, quantize
from .orchestration import OracleCritic, PlanningGenerator, PlanParseError, ReflectionConfig, reflect_loop
from .samplers import ORDERS, coverage_metrics
from .tasks import TaskKind, TaskMix, make_task
from .train import DivergenceError, TrainConfig, train_toy

log = logging.getLogger("unimask")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x]


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x]


def _mix(text: str) -> dict[str, float]:
    pairs = [item.split("=") for item in str(text).split(",") if item]
    if any(len(p) != 2 for p in pairs):
        raise argparse.ArgumentTypeError(f"expected name=weight pairs, got {text!r}")
    return {k: float(w) for k, w in pairs}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path):
    try:
        model = bb.load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}") from e
    model.eval()
    return model


# ------------------------------------------------------------------ commands


def cmd_train_toy(args) -> None:
    task = TaskMix(dict(args.mix)) if args.mix else make_task(args.task)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer,
                      betas=tuple(args.betas), seed=args.seed, model=dict(args.model or {}))
    out = _out(args)
    res = train_toy(task, cfg, out)
    with open(out / "config.json", "w") as f:
        json.dump({"task": dict(args.mix) if args.mix else task.kind.value, "train": asdict(cfg)}, f,
                  indent=2, sort_keys=True)
    print(f"eval loss {res.initial_eval:.4f} -> {res.final_eval:.4f}; checkpoint {res.checkpoint}")


def cmd_sample(args) -> None:
    task = make_task(args.task)
    model = predictor_for(_load_model(args.checkpoint), task)
    rng = np.random.default_rng(args.seed)
    out = _out(args)
    with open(out / "samples.jsonl", "w") as f:
        for i in range(args.n):
            ex = task.sample(rng)
            q, calls = run_example(task, model, ex, rng, steps=args.steps, sampler=args.sampler,
                                   temperature=args.temperature)
            f.write(json.dumps({"index": i, "quality": q, "calls": calls}, sort_keys=True) + "\n")


def cmd_bench_samplers(args) -> None:
    task = make_task(args.task)
    model = predictor_for(_load_model(args.checkpoint), task)
    timings: list = []
    rows = bench_samplers(model, task, args.samplers.split(","), _ints(args.steps),
                          range(args.seed, args.seed + args.seeds), n_prompts=args.prompts,
                          temperature=args.temperature, timings=timings)
    out = _out(args)
    write_results(rows, out / "bench_samplers.csv")
    write_timings(timings, out / "timings.csv")


def cmd_bench_speed_quality(args) -> None:
    task = make_task(args.task)
    model = predictor_for(_load_model(args.checkpoint), task)
    timings: list = []
    rows = bench_speed_quality(model, task, range(args.seed, args.seed + args.seeds),
                               steps_set=_ints(args.steps), thresholds=_floats(args.thresholds),
                               n_prompts=args.prompts, temperature=args.temperature, timings=timings)
    out = _out(args)
    write_results(rows, out / "speed_quality.csv")
    write_timings(timings, out / "timings.csv")


def cmd_quantize_bbox(args) -> None:
    out = _out(args)
    with open(args.input) as src, open(out / "boxes.jsonl", "w") as dst:
        for lineno, line in enumerate(src, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                box = pad_and_normalize((rec["x1"], rec["y1"], rec["x2"], rec["y2"]), rec["w"], rec["h"])
            except (KeyError, ValueError, TypeError) as e:
                raise ConfigError(f"line {lineno}: {e}") from e
            q = quantize(box)
            dst.write(json.dumps({"label": rec.get("label", ""), "normalized": list(box.coords()),
                                  "bins": list(q.bins)}, sort_keys=True) + "\n")


def cmd_mot_account(args) -> None:
    if args.preset == "large":
        cfg = bb.LARGE_CONFIG
    else:
        from .vocab import Vocabulary
        cfg = bb.ModelConfig(vocab_size=Vocabulary().total_size, **(args.model or {}))
    rep = bb.param_report(cfg)
    out = _out(args)
    flops = {m.value: bb.flop_estimate(cfg, args.text_len, 0 if m is bb.TaskMode.UND_ONLY else args.image_len, m)
             for m in bb.TaskMode}
    result = {"config": asdict(cfg), "loaded": rep.loaded, "trainable": rep.trainable, "breakdown": rep.breakdown,
              "forward_flops": flops,
              "training_speedup_vs_standard_mot": bb.elastic_speedup(cfg, args.text_len, args.image_len)}
    with open(out / "mot_account.json", "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
    for mode, n in rep.loaded.items():
        print(f"{mode:12s} loaded {n / 1e9:8.3f}B")


def write_ppm(values: np.ndarray, path, scale: int = 8) -> None:
    """Binary grayscale PPM (P6) of a 2-D array scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    g = np.zeros_like(v) if span == 0 else (v - v.min()) / span
    img = np.kron((g * 255).round().astype(np.uint8), np.ones((scale, scale), dtype=np.uint8))
    rgb = np.repeat(img[:, :, None], 3, axis=2)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        f.write(rgb.tobytes())


def cmd_plot_order(args) -> None:
    if args.order not in ORDERS:
        raise ConfigError(f"unknown order {args.order!r}; choose from {sorted(ORDERS)}")
    rng = np.random.default_rng(args.seed)
    try:
        order = ORDERS[args.order](args.n, rng)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = _out(args)
    rank = np.empty((args.n, args.n), dtype=np.int64)
    for i, (r, c) in enumerate(order.positions):
        rank[r, c] = i
    with open(out / "order.csv", "w") as f:
        f.write("rank,row,col\n")
        for i, (r, c) in enumerate(order.positions):
            f.write(f"{i},{r},{c}\n")
    write_ppm(rank, out / "order.ppm")
    rep = coverage_metrics(order)
    with open(out / "coverage.json", "w") as f:
        json.dump({"depth_coverage": rep.depth_coverage, "prefix_discrepancy": rep.prefix_discrepancy,
                   "mean_discrepancy": rep.star_discrepancy_estimate}, f, indent=2, sort_keys=True)


def cmd_reflect_demo(args) -> None:
    task = make_task("place")
    model = predictor_for(_load_model(args.checkpoint), task)
    cfg = planning_config(task, args.steps, temperature=args.temperature)
    rng = np.random.default_rng(args.seed)
    out = _out(args)
    summary = []
    for i in range(args.prompts):
        color = int(rng.integers(1, 12))
        quadrant = int(rng.integers(4))
        prompt = task.place_prompt(color, quadrant, plan=True)
        gen = PlanningGenerator(model, cfg, prompt_len=len(prompt))
        try:
            res = reflect_loop(gen, OracleCritic(place_check(task)), prompt,
                               ReflectionConfig(max_rounds=args.rounds), np.random.default_rng([args.seed, i]),
                               vocab=task.vocab, trace_path=out / f"trace_{i:03d}.jsonl")
        except PlanParseError as e:
            # an unparseable generation fails the request, like in the benchmarks
            summary.append({"prompt": i, "accepted": False, "rounds_used": None, "error": str(e)})
            continue
        summary.append({"prompt": i, "accepted": res.accepted, "rounds_used": res.rounds_used})
    with open(out / "reflect_summary.jsonl", "w") as f:
        for row in summary:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ------------------------------------------------------------------ parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file whose keys override subcommand defaults")
    common.add_argument("--out", default="out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="unimask", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    subs = {}
    tasks = [k.value for k in TaskKind]

    s = subs["train-toy"] = sub.add_parser("train-toy", parents=[common])
    s.add_argument("--task", choices=tasks, default="grid_pattern")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--optimizer", choices=["adamw", "sgd"], default="adamw")
    s.add_argument("--betas", type=_floats, default=(0.99, 0.999))
    s.add_argument("--mix", type=_mix, help="static task weights, e.g. grid_pattern=3,caption=1")
    s.set_defaults(func=cmd_train_toy, model=None)

    s = subs["sample"] = sub.add_parser("sample", parents=[common])
    s.add_argument("--checkpoint")
    s.add_argument("--task", choices=tasks, default="grid_pattern")
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--sampler", default="confidence")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--temperature", type=float, default=0.0)
    s.set_defaults(func=cmd_sample)

    s = subs["bench-samplers"] = sub.add_parser("bench-samplers", parents=[common])
    s.add_argument("--checkpoint")
    s.add_argument("--task", choices=tasks, default="grid_pattern")
    s.add_argument("--samplers", default="stratified,halton,uniform,confidence")
    s.add_argument("--steps", default="16")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--prompts", type=int, default=1)
    s.add_argument("--temperature", type=float, default=1.0)
    s.set_defaults(func=cmd_bench_samplers)

    s = subs["bench-speed-quality"] = sub.add_parser("bench-speed-quality", parents=[common])
    s.add_argument("--checkpoint")
    s.add_argument("--task", choices=tasks, default="grid_pattern")
    s.add_argument("--steps", default="1,2,4,8,16")
    s.add_argument("--thresholds", default="0.5,0.9,0.99")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--prompts", type=int, default=1)
    s.add_argument("--temperature", type=float, default=0.0)
    s.set_defaults(func=cmd_bench_speed_quality)

    s = subs["quantize-bbox"] = sub.add_parser("quantize-bbox", parents=[common])
    s.add_argument("--input", help="JSONL of {label, x1, y1, x2, y2, w, h}")
    s.set_defaults(func=cmd_quantize_bbox)

    s = subs["mot-account"] = sub.add_parser("mot-account", parents=[common])
    s.add_argument("--preset", choices=["large", "toy"], default="large")
    s.add_argument("--text-len", type=int, default=256)
    s.add_argument("--image-len", type=int, default=1024)
    s.set_defaults(func=cmd_mot_account, model=None)

    s = subs["plot-order"] = sub.add_parser("plot-order", parents=[common])
    s.add_argument("--order", default="stratified")
    s.add_argument("--n", type=int, default=16)
    s.set_defaults(func=cmd_plot_order)

    s = subs["reflect-demo"] = sub.add_parser("reflect-demo", parents=[common])
    s.add_argument("--checkpoint", help="a PLACE checkpoint from train-toy")
    s.add_argument("--rounds", type=int, default=4)
    s.add_argument("--prompts", type=int, default=4)
    s.add_argument("--steps", type=int, default=4)
    s.add_argument("--temperature", type=float, default=1.0)
    s.set_defaults(func=cmd_reflect_demo)
    return p, subs


def parse_args(argv=None) -> argparse.Namespace:
    """Config-file keys become subcommand defaults; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser, subs = build_parser()
    if known.config:
        try:
            with open(known.config) as f:
                overrides = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config: {e}")
        if not isinstance(overrides, dict):
            parser.error("config must be a JSON object")
        command = parser.parse_args(argv).command
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        known_keys = set(vars(subs[command].parse_args([]))) - {"func", "config"}
        unknown = set(overrides) - known_keys
        if unknown:
            parser.error(f"unknown config keys for {command}: {sorted(unknown)}")
        subs[command].set_defaults(**overrides)
    args = parser.parse_args(argv)
    for opt in ("checkpoint", "input"):
        if opt in vars(args) and getattr(args, opt) is None:
            parser.error(f"--{opt} is required")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, KeyError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, IncompleteDecodeError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())

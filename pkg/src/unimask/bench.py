"""Decoding harness and benchmarks over the synthetic tasks.

Data artifacts (quality, call counts) are deterministic given the seed; wall
times go to a separate file so the data CSV stays byte-stable.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .backbone import ElasticMoT, TaskMode, ToyPredictor
from .diffusion import TimeGrid, sample, threshold_decode
from .grounding import BinRestricted, build_multiquery, dequantize, extract_boxes
from .modality import BranchRestricted
from .orchestration import PlanningConfig, PlannedOutput, PlanParseError, generate_with_planning
from .samplers import make_policy
from .tasks import PALETTE, Example, SyntheticTask, TaskKind
from .vocab import GEN, SequenceState, concat


class CallCounter:
    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, state):
        self.calls += 1
        return self.model(state)


def predictor_for(model: ElasticMoT, task: SyntheticTask):
    """Text-to-image tasks only need the GEN_ONLY subset of the weights."""
    if task.kind in (TaskKind.GRID_PATTERN, TaskKind.LUMA):
        base = ToyPredictor(model, TaskMode.GEN_ONLY)
    else:
        base = ToyPredictor(model)
    return BranchRestricted(base, task.vocab)


def query_state(task: SyntheticTask, ex: Example) -> tuple[SequenceState, list | None]:
    """Prompt plus the response masks to decode; FIND_CELL also returns the box groups."""
    v = task.vocab
    if task.kind is TaskKind.FIND_CELL:
        q = build_multiquery(ex.meta["labels"], task.tok, prefix=ex.prompt)
        return q.state, q.groups
    n_resp = len(ex.response_tags)
    grid = (task.n, task.n) if np.all(ex.response_tags == GEN) else None
    resp = SequenceState(np.full(n_resp, v.mask), ex.response_tags, t=1.0, grid_shape=grid)
    return concat(ex.prompt.copy(frozen=np.ones(len(ex.prompt), bool)), resp, t=1.0), None


def planning_config(task: SyntheticTask, steps: int, sampler: str = "stratified",
                    temperature: float = 0.0, plan: bool = True) -> PlanningConfig:
    return PlanningConfig(task.vocab, task.resolution_map(), task.resolution, steps=steps,
                          plan_length=6 if plan else 1, image_policy=sampler, temperature=temperature)


def run_example(task: SyntheticTask, model, ex: Example, rng: np.random.Generator, *, steps: int | None = None,
                threshold: float | None = None, sampler: str = "confidence", temperature: float = 0.0):
    """Decode one example; returns (quality, model calls)."""
    counter = CallCounter(model)
    if task.kind is TaskKind.PLACE:
        cfg = planning_config(task, steps, sampler if sampler != "confidence" else "stratified",
                              temperature, plan=ex.meta["plan"])
        try:
            out = generate_with_planning(counter, ex.prompt, cfg, rng)
            q = task.quality(ex, out.state)
        except PlanParseError:
            q = 0.0
        return q, counter.calls
    state, groups = query_state(task, ex)
    if task.kind is TaskKind.FIND_CELL:
        counter = CallCounter(BinRestricted(model, np.concatenate(groups), task.vocab))
    if threshold is not None:
        final, _ = threshold_decode(counter, state, threshold, max_steps=len(state), rng=rng,
                                    mask_id=task.vocab.mask, temperature=temperature)
    else:
        final = sample(counter, state, TimeGrid.uniform(steps), make_policy(sampler), rng,
                       mask_id=task.vocab.mask, temperature=temperature)
    boxes = None
    if task.kind is TaskKind.FIND_CELL:
        boxes = [dequantize(b) if b is not None and b.is_valid() else None
                 for b in extract_boxes(final, groups, task.vocab)]
    return task.quality(ex, final, boxes), counter.calls


@dataclass
class BenchResult:
    task: str
    sampler: str
    steps: int
    threshold: float
    seed: int
    quality: float
    calls: int


HEADER = [f.name for f in fields(BenchResult)]


def _examples(task: SyntheticTask, seed: int, n: int) -> list[Example]:
    rng = np.random.default_rng([seed, 0])
    return [task.sample(rng) for _ in range(n)]


def _cell(task, model, exs, seed, **kw):
    rng = np.random.default_rng([seed, 1])
    qs, calls = [], 0
    for ex in exs:
        q, c = run_example(task, model, ex, rng, **kw)
        qs.append(q)
        calls += c
    return float(np.mean(qs)), calls


def bench_samplers(model, task: SyntheticTask, samplers, steps_set, seeds, *, n_prompts: int = 4,
                   temperature: float = 1.0, timings: list | None = None) -> list[BenchResult]:
    """Quality per (sampler, K, seed). Prompts depend on the seed only, so cells are paired."""
    out = []
    for seed in seeds:
        exs = _examples(task, seed, n_prompts)
        for name in samplers:
            for k in steps_set:
                t0 = time.perf_counter()
                q, calls = _cell(task, model, exs, seed, steps=k, sampler=name, temperature=temperature)
                if timings is not None:
                    timings.append({"sampler": name, "steps": k, "seed": seed, "seconds": time.perf_counter() - t0})
                out.append(BenchResult(task.kind.value, name, k, float("nan"), seed, q, calls))
    return out


def bench_speed_quality(model, task: SyntheticTask, seeds, *, steps_set=(), thresholds=(), n_prompts: int = 4,
                        temperature: float = 0.0, timings: list | None = None) -> list[BenchResult]:
    """Quality against fixed step counts and against confidence thresholds."""
    out = []
    for seed in seeds:
        exs = _examples(task, seed, n_prompts)
        for k in steps_set:
            t0 = time.perf_counter()
            q, calls = _cell(task, model, exs, seed, steps=k, temperature=temperature)
            if timings is not None:
                timings.append({"sampler": "confidence", "steps": k, "seed": seed, "seconds": time.perf_counter() - t0})
            out.append(BenchResult(task.kind.value, "confidence", k, float("nan"), seed, q, calls))
        for th in thresholds:
            t0 = time.perf_counter()
            q, calls = _cell(task, model, exs, seed, threshold=th, temperature=temperature)
            if timings is not None:
                timings.append({"sampler": "threshold", "threshold": th, "seed": seed,
                                "seconds": time.perf_counter() - t0})
            out.append(BenchResult(task.kind.value, "threshold", 0, th, seed, q, calls))
    return out


def write_results(rows: list[BenchResult], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HEADER)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def read_results(path) -> list[BenchResult]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [BenchResult(r["task"], r["sampler"], int(r["steps"]), float(r["threshold"]), int(r["seed"]),
                        float(r["quality"]), int(r["calls"])) for r in rows]


def write_timings(rows: list[dict], path) -> None:
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------ planning and reflection


def place_check(task: SyntheticTask):
    """Oracle for PLACE prompts ``place <color> <row> <col> [plan]``: None when the image is right."""
    v = task.vocab

    def check(prompt: SequenceState, out: PlannedOutput):
        words = [v.describe(int(t)) for t in prompt.tokens]
        color = PALETTE.index(words[1])
        quadrant = ("top", "bottom").index(words[2]) * 2 + ("left", "right").index(words[3])
        if task.place_success(task.image_codes(out.state), color, quadrant):
            return None
        return [v.text_id("wrong")]

    return check


def _place_prompts(task: SyntheticTask, seed: int):
    rng = np.random.default_rng([seed, 0])
    return int(rng.integers(1, len(PALETTE))), int(rng.integers(4))


@dataclass
class PlanningRow:
    seed: int
    planned: float
    unplanned: float
    plan_consistent: float


def bench_planning(model, task: SyntheticTask, seeds, *, steps: int = 2, temperature: float = 1.0) -> list[PlanningRow]:
    """Same PLACE request with and without a layout plan.

    ``plan_consistent`` is 1 when the placed cell lies inside the planned box.
    """
    from .orchestration import edit_region
    rows = []
    for seed in seeds:
        color, quadrant = _place_prompts(task, seed)
        res = {}
        consistent = 0.0
        for plan in (True, False):
            prompt = task.place_prompt(color, quadrant, plan)
            cfg = planning_config(task, steps, temperature=temperature, plan=plan)
            rng = np.random.default_rng([seed, 1])
            try:
                out = generate_with_planning(model, prompt, cfg, rng)
            except PlanParseError:
                res[plan] = 0.0
                continue
            codes = task.image_codes(out.state)
            res[plan] = float(task.place_success(codes, color, quadrant))
            if plan and codes is not None and len(out.plan):
                region = edit_region(out.plan, task.n)
                hits = codes != 0
                consistent = float(hits.any() and bool(np.all(region[hits])))
        rows.append(PlanningRow(seed, res[True], res[False], consistent))
    return rows


@dataclass
class ReflectionRow:
    seed: int
    max_rounds: int
    success: bool
    rounds_used: int


def bench_reflection(model, task: SyntheticTask, rounds_set, seeds, *, steps: int = 2,
                     temperature: float = 1.0, budget: int = 8192, window: int = 3) -> list[ReflectionRow]:
    """Oracle-critic reflection on PLACE for each N; each seed reuses the same request."""
    from .orchestration import OracleCritic, PlanningGenerator, ReflectionConfig, reflect_loop
    critic = OracleCritic(place_check(task))
    cfg = planning_config(task, steps, temperature=temperature)
    rows = []
    for seed in seeds:
        color, quadrant = _place_prompts(task, seed)
        prompt = task.place_prompt(color, quadrant, plan=True)
        gen = PlanningGenerator(model, cfg, prompt_len=len(prompt))
        for n in rounds_set:
            rcfg = ReflectionConfig(max_rounds=n, context_budget=budget, history_window=window)
            try:
                res = reflect_loop(gen, critic, prompt, rcfg, np.random.default_rng([seed, 1]), vocab=task.vocab)
                rows.append(ReflectionRow(seed, n, res.accepted, res.rounds_used))
            except PlanParseError:
                rows.append(ReflectionRow(seed, n, False, n))
    return rows

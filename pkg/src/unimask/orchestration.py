"""Layout planning, planned editing and the generate/critique/regenerate loop.

Layout wire format: ``label b b b b`` per item (four box-bin tokens), items
separated by SEP, the plan terminated by EXP, which then expands into the
image span.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .diffusion import TimeGrid, sample
from .grounding import BBox, QuantBox, dequantize
from .modality import ContextBudgetError, ResolutionMap, interleaved_sample
from .samplers import ConfidencePolicy, GridOrderPolicy
from .tasks import cells_in_box
from .vocab import GEN, UND, SequenceState, Vocabulary, concat


class PlanParseError(ValueError):
    pass


class Verdict(enum.Enum):
    ACCEPT = "ACCEPT"
    REVISE = "REVISE"


@dataclass(frozen=True)
class CritiqueResult:
    verdict: Verdict
    feedback: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "feedback", tuple(int(x) for x in self.feedback))
        if self.verdict is Verdict.REVISE and not self.feedback:
            raise ValueError("REVISE needs non-empty feedback")


@dataclass(frozen=True)
class LayoutPlan:
    items: tuple[tuple[tuple[int, ...], QuantBox], ...] = ()

    def __post_init__(self):
        items = tuple((tuple(int(x) for x in label), box) for label, box in self.items)
        for label, box in items:
            if not label:
                raise ValueError("layout item without a label")
            if not box.is_valid():
                raise ValueError(f"inverted box {box.bins}")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)

    def boxes(self) -> list[BBox]:
        return [dequantize(b) for _, b in self.items]

    def tokens(self, vocab: Vocabulary, terminate: bool = True) -> list[int]:
        out = []
        for i, (label, box) in enumerate(self.items):
            if i:
                out.append(vocab.sep)
            out.extend(label)
            out.extend(vocab.bin_id(b) for b in box.bins)
        if terminate:
            out.append(vocab.exp)
        return out

    def to_json(self, vocab: Vocabulary | None = None) -> list:
        rows = []
        for label, box in self.items:
            name = " ".join(vocab.describe(t) for t in label) if vocab else list(label)
            rows.append({"label": name, "bins": list(box.bins)})
        return rows


def parse_layout(tokens, vocab: Vocabulary) -> LayoutPlan:
    """Inverse of ``LayoutPlan.tokens(terminate=False)``."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        return LayoutPlan()
    items = []
    chunks, cur = [], []
    for t in tokens:
        if t == vocab.sep:
            chunks.append(cur)
            cur = []
        else:
            cur.append(t)
    chunks.append(cur)
    for chunk in chunks:
        if len(chunk) < 5:
            raise PlanParseError(f"layout item too short: {chunk}")
        label, bins = chunk[:-4], chunk[-4:]
        if not all(vocab.is_bin(bins)):
            raise PlanParseError(f"layout item does not end in 4 box bins: {chunk}")
        if any(vocab.is_bin(label)) or any(t in (vocab.mask, vocab.exp, vocab.pad) for t in label) \
                or any(vocab.is_vq(label)):
            raise PlanParseError(f"bad layout label: {label}")
        box = QuantBox(tuple(int(b) for b in vocab.bin_index(bins)))
        if not box.is_valid():
            raise PlanParseError(f"inverted layout box {box.bins}")
        items.append((tuple(label), box))
    return LayoutPlan(tuple(items))


@dataclass
class PlanningConfig:
    vocab: Vocabulary
    rmap: ResolutionMap
    resolution: int
    steps: int = 8
    plan_length: int = 6          # response masks: layout tokens + the EXP slot
    image_policy: str = "stratified"
    temperature: float = 0.0
    max_len: int | None = None


@dataclass
class PlannedOutput:
    plan: LayoutPlan
    image: np.ndarray             # VQ token ids, row-major
    state: SequenceState

    @property
    def grid_shape(self):
        return self.state.grid_shape


def split_response(state: SequenceState, prompt_len: int, vocab: Vocabulary) -> tuple[LayoutPlan, np.ndarray]:
    """Parse ``layout... <image span>`` after the prompt."""
    resp_tokens = state.tokens[prompt_len:]
    resp_gen = (state.branch_tags[prompt_len:] == GEN) & ~state.frozen[prompt_len:]
    idx = np.flatnonzero(resp_gen)
    if len(idx) == 0:
        raise PlanParseError("no image span in the response")
    a, b = idx[0], idx[-1] + 1
    if len(idx) != b - a:
        raise PlanParseError("image span is not contiguous")
    if b != len(resp_tokens):
        raise PlanParseError("tokens after the image span")
    return parse_layout(resp_tokens[:a], vocab), resp_tokens[a:b].copy()


def generate_with_planning(model, prompt: SequenceState, cfg: PlanningConfig, rng: np.random.Generator,
                           trace: list | None = None) -> PlannedOutput:
    """One interleaved decode: layout first, then the image the EXP token expands into."""
    state = interleaved_sample(model, prompt, TimeGrid.uniform(cfg.steps), cfg.rmap, cfg.resolution, rng,
                               vocab=cfg.vocab, length=cfg.plan_length, image_policy=cfg.image_policy,
                               temperature=cfg.temperature, max_len=cfg.max_len, trace=trace)
    plan, image = split_response(state, len(prompt), cfg.vocab)
    return PlannedOutput(plan, image, state)


def edit_region(plan: LayoutPlan, side: int) -> np.ndarray:
    region = np.zeros((side, side), dtype=bool)
    for box in plan.boxes():
        region |= cells_in_box(box, side)
    return region


def edit_with_planning(model, source: SequenceState, instruction: SequenceState, cfg: PlanningConfig,
                       rng: np.random.Generator) -> PlannedOutput:
    """Plan the edit region, then repaint only the cells inside the planned boxes.

    ``source`` is the image span (GEN tags, square grid). Cells outside the
    plan are copied from the source unchanged.
    """
    side = cfg.rmap.side(cfg.resolution)
    if len(source) != side * side or np.any(source.branch_tags != GEN):
        raise ValueError(f"source must be a GEN-tagged {side}x{side} image span")
    src = source.copy(frozen=np.ones(len(source), bool), grid_shape=(side, side))
    context = concat(src, instruction.copy(frozen=np.ones(len(instruction), bool)), t=1.0)
    planned = sample(model, context, TimeGrid.uniform(max(1, min(cfg.steps, cfg.plan_length))),
                     ConfidencePolicy(), rng, mask_id=cfg.vocab.mask, length=cfg.plan_length,
                     temperature=cfg.temperature)
    layout = planned.tokens[len(context):]
    if layout[-1] != cfg.vocab.exp:
        raise PlanParseError("edit plan does not end with EXP")
    plan = parse_layout(layout[:-1], cfg.vocab)
    region = edit_region(plan, side).reshape(-1)
    canvas = SequenceState(np.where(region, cfg.vocab.mask, source.tokens), np.full(len(source), GEN),
                           t=1.0, grid_shape=(side, side), frozen=~region)
    head = planned.copy(tokens=planned.tokens[:-1], branch_tags=planned.branch_tags[:-1],
                        frozen=np.ones(len(planned) - 1, bool))
    full = concat(head, canvas, t=1.0)
    if cfg.max_len is not None and len(full) > cfg.max_len:
        raise ContextBudgetError(f"edit context {len(full)} exceeds {cfg.max_len}")
    if region.any():
        full = sample(model, full, TimeGrid.uniform(cfg.steps), GridOrderPolicy(cfg.image_policy), rng,
                      mask_id=cfg.vocab.mask, temperature=cfg.temperature)
    image = full.tokens[len(head):].copy()
    return PlannedOutput(plan, image, full.copy(t=0.0))


# ------------------------------------------------------------------ reflection


@dataclass
class ReflectionConfig:
    max_rounds: int = 4
    context_budget: int = 8192
    history_window: int = 3

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.history_window < 0:
            raise ValueError("history_window must be >= 0")


class Generator(Protocol):
    max_new_tokens: int

    def __call__(self, context: SequenceState, rng: np.random.Generator) -> PlannedOutput: ...


Critic = Callable[[SequenceState, PlannedOutput], CritiqueResult]


@dataclass
class RoundRecord:
    round: int
    plan: list
    verdict: str
    feedback: list[int]
    tokens_used: int
    truncated: bool
    history_rounds: int

    def to_json(self) -> dict:
        return {"round": self.round, "plan": self.plan, "verdict": self.verdict, "feedback": self.feedback,
                "tokens_used": self.tokens_used, "truncated": self.truncated}


@dataclass
class ReflectionResult:
    image: np.ndarray
    output: PlannedOutput
    trace: list[RoundRecord]
    accepted: bool

    @property
    def rounds_used(self) -> int:
        return len(self.trace)


class ReflectionError(RuntimeError):
    def __init__(self, msg: str, trace: list[RoundRecord]):
        super().__init__(msg)
        self.trace = trace


def round_block(out: PlannedOutput, critique: CritiqueResult, vocab: Vocabulary) -> SequenceState:
    """History entry for one round: layout, image, critique feedback (all frozen)."""
    plan = np.array(out.plan.tokens(vocab, terminate=False), dtype=np.int64)
    fb = np.array(critique.feedback, dtype=np.int64)
    tokens = np.concatenate([plan, out.image, fb, [vocab.sep]]).astype(np.int64)
    tags = np.concatenate([np.full(len(plan), UND), np.full(len(out.image), GEN),
                           np.full(len(fb) + 1, UND)]).astype(np.int8)
    return SequenceState(tokens, tags, frozen=np.ones(len(tokens), bool))


def build_context(prompt: SequenceState, history: list[SequenceState], cfg: ReflectionConfig,
                  reserve: int) -> tuple[SequenceState, int, bool]:
    """Prompt plus the newest whole rounds that fit the window and the budget.

    Returns (context, rounds kept, whether anything was dropped).
    """
    keep = history[-cfg.history_window:] if cfg.history_window else []
    while keep and len(prompt) + sum(len(h) for h in keep) + reserve > cfg.context_budget:
        keep = keep[1:]
    dropped = len(keep) < len(history)
    frozen_prompt = prompt.copy(frozen=np.ones(len(prompt), bool))
    ctx = concat(frozen_prompt, *keep, t=1.0) if keep else frozen_prompt.copy(t=1.0)
    ctx = ctx.copy(grid_shape=None)
    return ctx, len(keep), dropped


def reflect_loop(generator: Generator, critic: Critic, prompt: SequenceState, cfg: ReflectionConfig,
                 rng: np.random.Generator, *, vocab: Vocabulary, trace_path=None) -> ReflectionResult:
    """Generate, critique, regenerate until ACCEPT or ``max_rounds``.

    Round 1 draws from ``rng`` itself; round k > 1 from the k-1'th spawned
    child, so the rounds a shorter run executes are identical in a longer one.
    """
    reserve = generator.max_new_tokens
    if len(prompt) + reserve > cfg.context_budget:
        raise ContextBudgetError(f"prompt ({len(prompt)}) plus output ({reserve}) exceeds the budget")
    history: list[SequenceState] = []
    trace: list[RoundRecord] = []
    out = None
    accepted = False
    for r in range(1, cfg.max_rounds + 1):
        round_rng = rng if r == 1 else rng.spawn(1)[0]
        context, kept, dropped = build_context(prompt, history, cfg, reserve)
        assert len(context) + reserve <= cfg.context_budget
        out = generator(context, round_rng)
        used = len(context) + reserve
        assert len(out.state) <= used, "generator exceeded its declared output length"
        try:
            critique = critic(prompt, out)
        except Exception as e:
            raise ReflectionError(f"critic failed in round {r}: {e}", trace) from e
        trace.append(RoundRecord(r, out.plan.to_json(), critique.verdict.value, list(critique.feedback),
                                 len(out.state), dropped, kept))
        if critique.verdict is Verdict.ACCEPT:
            accepted = True
            break
        history.append(round_block(out, critique, vocab))
    if trace_path is not None:
        dump_reflection_trace(trace, trace_path)
    return ReflectionResult(out.image, out, trace, accepted)


def dump_reflection_trace(trace: list[RoundRecord], path) -> None:
    with open(path, "w") as f:
        for rec in trace:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


# ------------------------------------------------------------------ adapters


@dataclass
class PlanningGenerator:
    """Wraps ``generate_with_planning`` for the reflection loop.

    With ``history_blind`` the model only sees the first ``prompt_len``
    context tokens (toy models are not trained on reflection histories); the
    full context still counts against the budget.
    """

    model: object
    cfg: PlanningConfig
    prompt_len: int | None = None
    history_blind: bool = True

    @property
    def max_new_tokens(self) -> int:
        return self.cfg.plan_length - 1 + self.cfg.rmap.tokens(self.cfg.resolution)

    def __call__(self, context: SequenceState, rng: np.random.Generator) -> PlannedOutput:
        seen = context
        if self.history_blind and self.prompt_len is not None:
            seen = context.copy(tokens=context.tokens[:self.prompt_len],
                                branch_tags=context.branch_tags[:self.prompt_len],
                                frozen=context.frozen[:self.prompt_len])
        out = generate_with_planning(self.model, seen, self.cfg, rng)
        if seen is context:
            return out
        # report the output as if appended to the full context
        resp = out.state.copy(tokens=out.state.tokens[len(seen):], branch_tags=out.state.branch_tags[len(seen):],
                              frozen=out.state.frozen[len(seen):])
        return PlannedOutput(out.plan, out.image, concat(context, resp, t=0.0))


@dataclass
class ScriptedCritic:
    verdicts: list[Verdict]
    feedback: tuple[int, ...] = (0,)
    calls: int = 0

    def __call__(self, prompt, out) -> CritiqueResult:
        v = self.verdicts[min(self.calls, len(self.verdicts) - 1)]
        self.calls += 1
        return CritiqueResult(v, () if v is Verdict.ACCEPT else self.feedback)


@dataclass
class OracleCritic:
    """Exact checker for a synthetic task: ``check(prompt, output) -> feedback ids or None``."""

    check: Callable[[SequenceState, PlannedOutput], list[int] | None]

    def __call__(self, prompt, out) -> CritiqueResult:
        fb = self.check(prompt, out)
        return CritiqueResult(Verdict.ACCEPT) if fb is None else CritiqueResult(Verdict.REVISE, tuple(fb))

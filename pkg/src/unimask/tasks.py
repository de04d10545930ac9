"""Synthetic desk-scale tasks with exactly checkable outputs.

Images are small grids of VQ codes. Code ``i`` stands for ``PALETTE[i]`` and
renders to gray level ``17 * i`` when a scalar field is needed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .conditioning import MicroConditions, dropout_conditions, measure_luminance_contrast, render_conditions
from .grounding import BBox, box_tokens, dequantize, precision_at, quantize
from .modality import ResolutionMap
from .vocab import GEN, UND, SequenceState, Tokenizer, Vocabulary, concat

PALETTE = ("black", "red", "green", "blue", "yellow", "cyan", "magenta", "orange",
           "purple", "white", "gray", "brown")
BACKGROUND = 0
GRAY_STEP = 17


class TaskKind(enum.Enum):
    GRID_PATTERN = "grid_pattern"
    FIND_CELL = "find_cell"
    CAPTION = "caption"
    PLACE = "place"
    LUMA = "luma"


@dataclass
class Example:
    x0: SequenceState          # clean training sequence, conditioning frozen
    prompt: SequenceState      # conditioning only
    response_tags: np.ndarray  # tags of the positions to decode, as seen at inference
    meta: dict = field(default_factory=dict)
    t_exp: float | None = None  # set for interleaved examples


def gray_levels(codes) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * GRAY_STEP


def cell_box(r: int, c: int, n: int) -> BBox:
    return BBox(c / n, r / n, (c + 1) / n, (r + 1) / n)


def cells_in_box(box: BBox, n: int) -> np.ndarray:
    """Boolean n x n mask of cells whose centre lies inside ``box``."""
    centres = (np.arange(n) + 0.5) / n
    rows = (centres >= box.y1) & (centres <= box.y2)
    cols = (centres >= box.x1) & (centres <= box.x2)
    return rows[:, None] & cols[None, :]


@dataclass
class SyntheticTask:
    kind: TaskKind
    n: int = 8
    vocab: Vocabulary = field(default_factory=Vocabulary)
    plan_rate: float = 0.5      # PLACE: share of prompts asking for a plan
    p_drop: float = 0.3         # LUMA: condition dropout

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = TaskKind(self.kind)
        if self.vocab.n_vq < len(PALETTE):
            raise ValueError("vocabulary has fewer VQ codes than palette colors")
        if self.kind in (TaskKind.GRID_PATTERN, TaskKind.PLACE) and self.n % 2:
            raise ValueError("grid side must be even for quadrant tasks")
        self.tok = Tokenizer(self.vocab)

    # ------------------------------------------------------------ helpers
    def _text(self, words) -> np.ndarray:
        return np.array([self.vocab.text_id(w) for w in words], dtype=np.int64)

    def _image_state(self, codes: np.ndarray, frozen: bool) -> SequenceState:
        ids = self.vocab.vq_offset + codes.reshape(-1)
        return SequenceState(ids, np.full(len(ids), GEN), grid_shape=codes.shape,
                             frozen=np.full(len(ids), frozen))

    def _text_state(self, ids, frozen: bool) -> SequenceState:
        ids = np.asarray(ids, dtype=np.int64)
        return SequenceState(ids, np.full(len(ids), UND), frozen=np.full(len(ids), frozen))

    def image_codes(self, state: SequenceState) -> np.ndarray | None:
        """The decoded (non-frozen) image span as an n x n code grid, or None."""
        gen = np.flatnonzero((state.branch_tags == GEN) & ~state.frozen)
        if len(gen) != self.n * self.n:
            return None
        ids = state.tokens[gen]
        if not np.all(self.vocab.is_vq(ids)):
            return None
        return self.vocab.vq_code(ids).reshape(self.n, self.n)

    # ------------------------------------------------------------ sampling
    def sample(self, rng: np.random.Generator) -> Example:
        return getattr(self, f"_sample_{self.kind.value}")(rng)

    def _sample_grid_pattern(self, rng) -> Example:
        a, b = rng.choice(np.arange(1, len(PALETTE)), size=2, replace=False)
        pick = rng.integers(0, 2, size=4)
        h = self.n // 2
        codes = np.empty((self.n, self.n), dtype=np.int64)
        for q in range(4):
            r, c = divmod(q, 2)
            codes[r * h:(r + 1) * h, c * h:(c + 1) * h] = (a, b)[pick[q]]
        prompt = self._text_state(self._text([PALETTE[a], PALETTE[b]]), True)
        img = self._image_state(codes, False)
        return Example(concat(prompt, img), prompt, img.branch_tags,
                       meta={"colors": (int(a), int(b))})

    def _sample_find_cell(self, rng) -> Example:
        n = self.n
        k = int(rng.integers(1, 4))
        colors = rng.choice(np.arange(1, len(PALETTE)), size=k, replace=False)
        cells = rng.choice(n * n, size=k, replace=False)
        codes = np.full((n, n), BACKGROUND, dtype=np.int64)
        for col, cell in zip(colors, cells):
            codes.flat[cell] = col
        image = self._image_state(codes, True)
        boxes = [quantize(cell_box(*divmod(int(c), n), n)) for c in cells]
        ids, frozen = [], []
        for i, (col, q) in enumerate(zip(colors, boxes)):
            if i:
                ids.append(self.vocab.sep); frozen.append(True)
            ids.append(self.vocab.text_id(PALETTE[col])); frozen.append(True)
            ids.extend(box_tokens(q, self.vocab)); frozen.extend([False] * 4)
        query = SequenceState(np.array(ids), np.full(len(ids), UND), frozen=np.array(frozen))
        x0 = concat(image, query)
        return Example(x0, image, np.full(int((~query.frozen).sum()), UND),
                       meta={"labels": [PALETTE[c] for c in colors], "boxes": boxes})

    def _sample_caption(self, rng) -> Example:
        codes = rng.integers(1, len(PALETTE), size=(self.n, self.n))
        image = self._image_state(codes, True)
        cue = self._text_state(self._text(["caption"]), True)
        words = self._text([PALETTE[c] for c in codes.reshape(-1)])
        answer = self._text_state(words, False)
        prompt = concat(image, cue)
        return Example(concat(prompt, answer), prompt, answer.branch_tags, meta={"words": words})

    def quadrant_words(self, q: int) -> tuple[str, str]:
        r, c = divmod(q, 2)
        return ("top", "bottom")[r], ("left", "right")[c]

    def place_prompt(self, color: int, quadrant: int, plan: bool) -> SequenceState:
        words = ["place", PALETTE[color], *self.quadrant_words(quadrant)] + (["plan"] if plan else [])
        return self._text_state(self._text(words), True)

    def _sample_place(self, rng) -> Example:
        n, h = self.n, self.n // 2
        color = int(rng.integers(1, len(PALETTE)))
        quadrant = int(rng.integers(4))
        plan = bool(rng.random() < self.plan_rate)
        qr, qc = divmod(quadrant, 2)
        r = qr * h + int(rng.integers(h))
        c = qc * h + int(rng.integers(h))
        codes = np.full((n, n), BACKGROUND, dtype=np.int64)
        codes[r, c] = color
        prompt = self.place_prompt(color, quadrant, plan)
        parts = [prompt]
        if plan:
            layout = [self.vocab.text_id(PALETTE[color])] + box_tokens(quantize(cell_box(r, c, n)), self.vocab)
            parts.append(self._text_state(layout, False))
        parts.append(self._image_state(codes, False))
        x0 = concat(*parts)
        resp_len = len(x0) - len(prompt) - n * n + 1
        return Example(x0, prompt, np.full(resp_len, UND),
                       meta={"color": color, "quadrant": quadrant, "cell": (r, c), "plan": plan},
                       t_exp=float(rng.random()))

    def luma_prompt(self, cond: MicroConditions) -> SequenceState:
        ids = [self.vocab.text_id("image")] + self.tok.encode(render_conditions(cond))
        return self._text_state(ids, True)

    def _sample_luma(self, rng) -> Example:
        base = int(rng.integers(0, self.vocab.n_vq))
        codes = np.clip(base + rng.integers(-1, 2, size=(self.n, self.n)), 0, self.vocab.n_vq - 1)
        lum, con = measure_luminance_contrast(gray_levels(codes))
        cond = dropout_conditions(MicroConditions(luminance=lum, contrast=con), rng, self.p_drop)
        prompt = self.luma_prompt(cond)
        img = self._image_state(codes, False)
        return Example(concat(prompt, img), prompt, img.branch_tags, meta={"luminance": lum})

    # ------------------------------------------------------------ scoring
    def grid_valid(self, codes: np.ndarray | None, colors) -> bool:
        if codes is None:
            return False
        h = self.n // 2
        for q in range(4):
            r, c = divmod(q, 2)
            block = codes[r * h:(r + 1) * h, c * h:(c + 1) * h]
            if not (np.all(block == block.flat[0]) and block.flat[0] in colors):
                return False
        return True

    def place_success(self, codes: np.ndarray | None, color: int, quadrant: int) -> bool:
        """Exactly one non-background cell, of the right color, inside the named quadrant."""
        if codes is None:
            return False
        hits = np.argwhere(codes != BACKGROUND)
        if len(hits) != 1:
            return False
        r, c = hits[0]
        h = self.n // 2
        return bool(codes[r, c] == color and (r // h) * 2 + (c // h) == quadrant)

    def quality(self, ex: Example, final: SequenceState, boxes=None) -> float:
        """Per-task score: validity, precision@0.5 or token accuracy."""
        if self.kind is TaskKind.GRID_PATTERN:
            return float(self.grid_valid(self.image_codes(final), ex.meta["colors"]))
        if self.kind is TaskKind.CAPTION:
            got = final.tokens[len(ex.prompt):]
            return float(np.mean(got == ex.meta["words"]))
        if self.kind is TaskKind.FIND_CELL:
            return precision_at(boxes, [dequantize(q) for q in ex.meta["boxes"]])
        if self.kind is TaskKind.PLACE:
            return float(self.place_success(self.image_codes(final), ex.meta["color"], ex.meta["quadrant"]))
        if self.kind is TaskKind.LUMA:
            codes = self.image_codes(final)
            return float("nan") if codes is None else measure_luminance_contrast(gray_levels(codes))[0]
        raise ValueError(self.kind)

    def resolution_map(self) -> ResolutionMap:
        return ResolutionMap({self.n * 32: self.n * self.n})

    @property
    def resolution(self) -> int:
        return self.n * 32


DEFAULT_SIDE = {
    TaskKind.GRID_PATTERN: 8,
    TaskKind.FIND_CELL: 4,
    TaskKind.CAPTION: 2,
    TaskKind.PLACE: 4,
    TaskKind.LUMA: 4,
}


def make_task(kind, n: int | None = None, **kw) -> SyntheticTask:
    kind = TaskKind(kind)
    return SyntheticTask(kind, n=DEFAULT_SIDE[kind] if n is None else n, **kw)


@dataclass
class TaskMix:
    """Static per-task sampling weights over tasks sharing one vocabulary.

    Quacks like a task for training: ``sample`` draws the task, then the example.
    """

    weights: dict
    vocab: Vocabulary = field(default_factory=Vocabulary)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("empty task mix")
        w = np.array([float(x) for x in self.weights.values()])
        if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise ValueError(f"bad mix weights {self.weights}")
        self.tasks = [make_task(k, vocab=self.vocab) for k in self.weights]
        self.probs = w / w.sum()

    def sample(self, rng: np.random.Generator) -> Example:
        return self.tasks[int(rng.choice(len(self.tasks), p=self.probs))].sample(rng)

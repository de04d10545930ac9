"""Box coordinates as 1025 quantized bins, multi-box queries and box metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import TimeGrid, sample
from .vocab import N_BBOX_BINS, UND, SequenceState, Tokenizer, Vocabulary, concat

MAX_BIN = N_BBOX_BINS - 1


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        c = self.coords()
        if not all(np.isfinite(c)) or min(c) < 0.0 or max(c) > 1.0:
            raise ValueError(f"box coordinates must lie in [0, 1]: {c}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {c}")

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class QuantBox:
    bins: tuple[int, int, int, int]

    def __post_init__(self):
        if len(self.bins) != 4:
            raise ValueError("a box is exactly 4 bins")
        if any(not 0 <= int(b) <= MAX_BIN for b in self.bins):
            raise ValueError(f"bins must lie in 0..{MAX_BIN}: {self.bins}")
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))

    def is_valid(self) -> bool:
        x1, y1, x2, y2 = self.bins
        return x1 <= x2 and y1 <= y2


def pad_and_normalize(box, w: float, h: float) -> BBox:
    """Pixel box in a w x h image -> [0,1] box in the top-left-anchored D x D pad, D = max(w, h)."""
    if w <= 0 or h <= 0:
        raise ValueError("image size must be positive")
    x1, y1, x2, y2 = (float(v) for v in box)
    if x1 > x2 or y1 > y2:
        raise ValueError(f"inverted box {box}")
    if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
        raise ValueError(f"box {box} outside the {w}x{h} image")
    d = float(max(w, h))
    return BBox(x1 / d, y1 / d, x2 / d, y2 / d)


def quantize_coord(c) -> np.ndarray:
    return np.floor(np.asarray(c, dtype=np.float64) * MAX_BIN + 0.5).astype(np.int64)


def quantize(b: BBox) -> QuantBox:
    return QuantBox(tuple(quantize_coord(b.coords()).tolist()))


def dequantize(q: QuantBox) -> BBox:
    x1, y1, x2, y2 = (b / MAX_BIN for b in q.bins)
    return BBox(x1, y1, x2, y2)


def box_tokens(q: QuantBox, vocab: Vocabulary) -> list[int]:
    return [vocab.bin_id(b) for b in q.bins]


def iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else float(a == b)


def precision_at(preds: list, gts: list[BBox], iou_thresh: float = 0.5) -> float:
    """Fraction of queries whose prediction (matched by position) clears ``iou_thresh``.

    A prediction of None (e.g. an inverted decoded box) counts as a miss.
    """
    if len(preds) != len(gts):
        raise ValueError("one prediction per ground-truth box expected")
    if not gts:
        raise ValueError("no boxes")
    hits = sum(p is not None and iou(p, g) >= iou_thresh for p, g in zip(preds, gts))
    return hits / len(gts)


@dataclass
class MultiQuery:
    state: SequenceState
    groups: list[np.ndarray]  # 4 mask positions per label


def build_multiquery(labels: list[str], tokenizer: Tokenizer, prefix: SequenceState | None = None) -> MultiQuery:
    """``label [M][M][M][M] SEP label [M][M][M][M] ...`` with labels (and prefix) frozen."""
    vocab = tokenizer.vocab
    if not labels:
        raise ValueError("need at least one label")
    tokens, frozen, groups = [], [], []
    offset = 0 if prefix is None else len(prefix)
    for i, label in enumerate(labels):
        ids = tokenizer.encode(label)
        if not ids:
            raise ValueError(f"empty label at index {i}")
        if i:
            tokens.append(vocab.sep); frozen.append(True)
        tokens.extend(ids); frozen.extend([True] * len(ids))
        start = offset + len(tokens)
        groups.append(np.arange(start, start + 4))
        tokens.extend([vocab.mask] * 4); frozen.extend([False] * 4)
    query = SequenceState(np.array(tokens), np.full(len(tokens), UND, dtype=np.int8), t=1.0,
                          frozen=np.array(frozen))
    if prefix is not None:
        query = concat(prefix.copy(frozen=np.ones(len(prefix), bool)), query, t=1.0)
    return MultiQuery(query, groups)


class BinRestricted:
    """Wrap a predictor so that chosen positions may only emit box-bin tokens."""

    def __init__(self, model, positions, vocab: Vocabulary):
        self.model = model
        self.positions = np.asarray(positions, dtype=np.int64)
        self.vocab = vocab

    def __call__(self, state: SequenceState) -> np.ndarray:
        logits = np.array(self.model(state), dtype=np.float64)
        allowed = np.zeros(logits.shape[1], dtype=bool)
        allowed[self.vocab.bin_ids()] = True
        logits[np.ix_(self.positions, ~allowed)] = -np.inf
        return logits


def extract_boxes(state: SequenceState, groups: list[np.ndarray], vocab: Vocabulary) -> list[QuantBox | None]:
    """Read each group's 4 tokens back as a box; None when not 4 bins."""
    out = []
    for g in groups:
        ids = state.tokens[g]
        if not np.all(vocab.is_bin(ids)):
            out.append(None)
            continue
        out.append(QuantBox(tuple(vocab.bin_index(ids).tolist())))
    return out


def decode_boxes(model, query: MultiQuery, steps: int, rng: np.random.Generator, *, vocab: Vocabulary,
                 restrict: bool = True, order_policy=None) -> tuple[list[BBox | None], SequenceState]:
    """Decode every box of a multi-query in ``steps`` reverse steps.

    Invalid (inverted or non-bin) boxes come back as None.
    """
    pos = np.concatenate(query.groups)
    predictor = BinRestricted(model, pos, vocab) if restrict else model
    final = sample(predictor, query.state, TimeGrid.uniform(steps), order_policy, rng, mask_id=vocab.mask)
    boxes = []
    for q in extract_boxes(final, query.groups, vocab):
        boxes.append(dequantize(q) if q is not None and q.is_valid() else None)
    return boxes, final

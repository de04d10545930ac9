"""Modality-aware masking for interleaved text/image sequences.

Late in the forward process (t above a per-image time ``t_exp``) a whole image
span is represented by one text-branch token, EXP or MASK. At inference every
response mask starts on the text branch; revealing an EXP token swaps it for a
grid of generation-branch masks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (IncompleteDecodeError, Predictor, PredictorOutput, TimeGrid, _call,
                        _choose_tokens, _with_response, forward_mask, mdm_loss, step_quotas)
from .samplers import GridOrderPolicy
from .vocab import GEN, UND, SequenceState, Vocabulary, check_tags


class ContextBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResolutionMap:
    """Output resolution (square side in pixels) -> number of VQ tokens."""

    entries: dict = field(default_factory=lambda: {64: 4, 128: 16, 256: 64, 512: 256, 1024: 1024})

    def __post_init__(self):
        for res, count in self.entries.items():
            side = math.isqrt(count)
            if side * side != count:
                raise ValueError(f"{res}px maps to {count} tokens, not a square grid")

    def tokens(self, resolution: int) -> int:
        try:
            return self.entries[resolution]
        except KeyError:
            raise ValueError(f"unknown resolution {resolution}") from None

    def side(self, resolution: int) -> int:
        return math.isqrt(self.tokens(resolution))


def image_spans(state: SequenceState) -> list[tuple[int, int]]:
    """Contiguous runs of non-frozen GEN-tagged positions."""
    gen = (state.branch_tags == GEN) & ~state.frozen
    spans, start = [], None
    for i, g in enumerate(gen):
        if g and start is None:
            start = i
        elif not g and start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(gen)))
    return spans


def collapse_targets(x0: SequenceState, vocab: Vocabulary, which: list[bool] | None = None) -> SequenceState:
    """Replace image spans by single EXP tokens (all spans, or those flagged in ``which``)."""
    check_tags(x0, vocab)
    spans = image_spans(x0)
    if which is None:
        which = [True] * len(spans)
    if len(which) != len(spans):
        raise ValueError("one flag per image span expected")
    tokens, tags, frozen = [], [], []
    prev = 0
    any_kept = False
    for (a, b), collapse in zip(spans, which):
        tokens.append(x0.tokens[prev:a]); tags.append(x0.branch_tags[prev:a]); frozen.append(x0.frozen[prev:a])
        if collapse:
            tokens.append([vocab.exp]); tags.append([UND]); frozen.append([False])
        else:
            any_kept = True
            tokens.append(x0.tokens[a:b]); tags.append(x0.branch_tags[a:b]); frozen.append(x0.frozen[a:b])
        prev = b
    tokens.append(x0.tokens[prev:]); tags.append(x0.branch_tags[prev:]); frozen.append(x0.frozen[prev:])
    return SequenceState(
        np.concatenate(tokens).astype(np.int64),
        np.concatenate(tags).astype(np.int8),
        t=x0.t,
        grid_shape=x0.grid_shape if any_kept else None,
        frozen=np.concatenate(frozen).astype(bool),
    )


def _collapse_flags(t: float, t_exp, n_spans: int) -> list[bool]:
    t_exp = np.atleast_1d(np.asarray(t_exp, dtype=np.float64))
    if len(t_exp) != n_spans:
        raise ValueError(f"{n_spans} image spans but {len(t_exp)} t_exp values")
    # t == t_exp keeps the span expanded
    return [bool(t > te) for te in t_exp]


def interleaved_forward(x0: SequenceState, t_exp, t: float, rng: np.random.Generator,
                        *, vocab: Vocabulary) -> SequenceState:
    """Sample X_t from a clean interleaved sequence.

    Spans with t > t_exp collapse to one UND token (MASK w.p. t, else EXP);
    the rest stay expanded and mask per token at rate t like text does.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if np.any(x0.tokens == vocab.mask):
        raise ValueError("x0 must be mask-free")
    spans = image_spans(x0)
    if not spans:
        return forward_mask(x0.copy(t=0.0), 0.0, t, rng, mask_id=vocab.mask)
    flags = _collapse_flags(t, t_exp, len(spans))
    u = rng.random(len(x0))
    hit = (u < t) & ~x0.frozen
    noisy = x0.tokens.copy()
    noisy[hit] = vocab.mask
    staged = x0.copy(tokens=noisy)
    out = collapse_targets(staged, vocab, flags)
    # collapsed spans: the single token follows the span's first uniform
    pos = 0
    prev = 0
    for (a, b), collapse in zip(spans, flags):
        pos += a - prev
        if collapse:
            out.tokens[pos] = vocab.mask if u[a] < t else vocab.exp
            pos += 1
        else:
            pos += b - a
        prev = b
    return out.copy(t=float(t))


def loss_target(x0: SequenceState, t_exp, t: float, *, vocab: Vocabulary) -> SequenceState:
    """X_0 with the spans collapsed at time t replaced by EXP."""
    spans = image_spans(x0)
    if not spans:
        return x0
    return collapse_targets(x0, vocab, _collapse_flags(t, t_exp, len(spans)))


def interleaved_loss(x0: SequenceState, t_exp, xt: SequenceState, logits, t: float, *, vocab: Vocabulary):
    target = loss_target(x0, t_exp, t, vocab=vocab)
    if len(target) != len(xt):
        raise ValueError("xt does not match the collapse pattern implied by t and t_exp")
    return mdm_loss(target, xt, logits, t, mask_id=vocab.mask)


def expand_exp(state: SequenceState, resolution: int, rmap: ResolutionMap, *, vocab: Vocabulary) -> SequenceState:
    """Swap every revealed, non-frozen EXP for a square grid of GEN-tagged masks."""
    count = rmap.tokens(resolution)
    side = rmap.side(resolution)
    hits = np.flatnonzero((state.tokens == vocab.exp) & ~state.frozen)
    if len(hits) == 0:
        return state
    tokens, tags, frozen = [], [], []
    prev = 0
    for h in hits:
        tokens.append(state.tokens[prev:h]); tags.append(state.branch_tags[prev:h]); frozen.append(state.frozen[prev:h])
        tokens.append(np.full(count, vocab.mask)); tags.append(np.full(count, GEN)); frozen.append(np.zeros(count, bool))
        prev = h + 1
    tokens.append(state.tokens[prev:]); tags.append(state.branch_tags[prev:]); frozen.append(state.frozen[prev:])
    return SequenceState(
        np.concatenate(tokens).astype(np.int64),
        np.concatenate(tags).astype(np.int8),
        t=state.t,
        grid_shape=(side, side),
        frozen=np.concatenate(frozen).astype(bool),
    )


def restrict_by_branch(logits: np.ndarray, state: SequenceState, vocab: Vocabulary) -> np.ndarray:
    """GEN rows may only emit VQ codes; UND rows never emit VQ codes."""
    out = np.array(logits, dtype=np.float64)
    vq = vocab.is_vq(np.arange(out.shape[1]))
    gen = state.branch_tags == GEN
    out[np.ix_(gen, ~vq)] = -np.inf
    out[np.ix_(~gen, vq)] = -np.inf
    return out


class BranchRestricted:
    """Predictor wrapper applying :func:`restrict_by_branch`."""

    def __init__(self, model: Predictor, vocab: Vocabulary):
        self.model = model
        self.vocab = vocab

    def __call__(self, state: SequenceState) -> np.ndarray:
        return restrict_by_branch(self.model(state), state, self.vocab)


def interleaved_sample(model: Predictor, prompt: SequenceState, grid: TimeGrid, rmap: ResolutionMap,
                       resolution: int, rng: np.random.Generator, *, vocab: Vocabulary, length: int,
                       image_policy: str = "stratified", temperature: float = 0.0,
                       max_len: int | None = None, trace: list | None = None) -> SequenceState:
    """Decode ``length`` text-branch masks after ``prompt``, expanding EXP tokens on reveal.

    After an expansion the per-step quotas are recomputed over the masks left,
    on the remaining part of the time grid. If an EXP appears on the last
    step, one extra step decodes the new image span.
    """
    policy = GridOrderPolicy(image_policy)
    state = _with_response(prompt, length, None, vocab.mask)
    times = list(grid.steps[::-1])  # t_K ... t_0

    def open_masks(st):
        return np.flatnonzero((st.tokens == vocab.mask) & ~st.frozen)

    quotas = step_quotas(len(open_masks(state)), grid)
    qi = 0
    step = 0
    i = 0
    while i < len(times) - 1:
        s = times[i + 1]
        if max_len is not None and len(state) > max_len:
            raise ContextBudgetError(f"sequence length {len(state)} exceeds budget {max_len}")
        logits = restrict_by_branch(_call(model, state, vocab.total_size), state, vocab)
        cand = open_masks(state)
        q = quotas[qi]
        if q > len(cand):
            raise IncompleteDecodeError("sampler ran out of masked positions", state)
        chosen = np.empty(0, dtype=np.int64)
        if q:
            conf = np.full(len(state), -np.inf)
            conf[cand] = PredictorOutput(logits[cand]).confidence
            chosen = np.asarray(policy.choose(state, conf, cand, q, rng), dtype=np.int64)
        new = state.copy(t=float(s))
        if len(chosen):
            new.tokens[chosen] = _choose_tokens(logits, chosen, temperature, rng, vocab.mask)
        if trace is not None:
            for p in chosen:
                trace.append({"step": step, "event": "unmask", "position": int(p), "token": int(new.tokens[p])})
        state = new
        step += 1
        i += 1
        qi += 1
        if np.any((state.tokens == vocab.exp) & ~state.frozen):
            before = np.flatnonzero((state.tokens == vocab.exp) & ~state.frozen)
            state = expand_exp(state, resolution, rmap, vocab=vocab)
            if trace is not None:
                shift = 0
                for p in before:
                    trace.append({"step": step - 1, "event": "expand", "position": int(p + shift),
                                  "token": int(rmap.tokens(resolution))})
                    shift += rmap.tokens(resolution) - 1
            n_open = len(open_masks(state))
            if i == len(times) - 1:
                times.append(0.0)
                quotas = [n_open]
            else:
                rest = np.array(times[i:][::-1]) / times[i]
                quotas = step_quotas(n_open, TimeGrid(rest))
            qi = 0
    if max_len is not None and len(state) > max_len:
        raise ContextBudgetError(f"sequence length {len(state)} exceeds budget {max_len}")
    if len(open_masks(state)):
        raise IncompleteDecodeError("masks remain after the final step", state)
    return state.copy(t=0.0)


def dump_trace(trace: list[dict], path) -> None:
    with open(path, "w") as f:
        for row in trace:
            f.write(json.dumps(row, sort_keys=True) + "\n")

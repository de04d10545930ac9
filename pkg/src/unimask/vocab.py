"""Unified vocabulary, a tiny word/char tokenizer and the sequence state."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

UND = 0
GEN = 1

N_BBOX_BINS = 1025

DEFAULT_WORDS = (
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    "white", "black", "gray", "brown",
    "top", "bottom", "left", "right", "center", "quadrant", "cell",
    "plan", "find", "place", "edit", "caption", "image", "color",
    "accept", "revise", "wrong", "missing", "extra", "ok",
    "RES", "CROP", "AESTHETIC", "HPS", "LUMINANCE", "CONTRAST",
)
DEFAULT_CHARS = "".join(c for c in string.printable if c not in string.whitespace)

_TOKEN_RE = re.compile(r"[A-Za-z]+|\S")


@dataclass(frozen=True)
class Vocabulary:
    """Id layout: text | vq | MASK EXP PAD SEP | box bins (1025 by default)."""

    text_tokens: tuple[str, ...] = DEFAULT_WORDS + tuple(DEFAULT_CHARS)
    n_vq: int = 16
    n_bins: int = N_BBOX_BINS

    def __post_init__(self):
        if len(set(self.text_tokens)) != len(self.text_tokens):
            raise ValueError("duplicate text symbols")
        if self.n_vq < 1:
            raise ValueError("need at least one VQ code")
        if self.n_bins < 0:
            raise ValueError("n_bins must be non-negative")

    @property
    def n_text(self) -> int:
        return len(self.text_tokens)

    @property
    def vq_offset(self) -> int:
        return self.n_text

    @property
    def mask(self) -> int:
        return self.n_text + self.n_vq

    @property
    def exp(self) -> int:
        return self.mask + 1

    @property
    def pad(self) -> int:
        return self.mask + 2

    @property
    def sep(self) -> int:
        return self.mask + 3

    @property
    def bin_offset(self) -> int:
        return self.mask + 4

    @property
    def n_specials(self) -> int:
        return 4 + self.n_bins

    @property
    def total_size(self) -> int:
        return self.n_text + self.n_vq + self.n_specials

    def __len__(self) -> int:
        return self.total_size

    @cached_property
    def _text_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.text_tokens)}

    def text_id(self, symbol: str) -> int:
        return self._text_index[symbol]

    def vq_id(self, code: int) -> int:
        if not 0 <= code < self.n_vq:
            raise ValueError(f"VQ code {code} out of range")
        return self.vq_offset + code

    def bin_id(self, k: int) -> int:
        if not 0 <= k < self.n_bins:
            raise ValueError(f"bin {k} out of range")
        return self.bin_offset + k

    def is_text(self, ids):
        ids = np.asarray(ids)
        return ids < self.n_text

    def is_vq(self, ids):
        ids = np.asarray(ids)
        return (ids >= self.vq_offset) & (ids < self.mask)

    def is_bin(self, ids):
        ids = np.asarray(ids)
        return (ids >= self.bin_offset) & (ids < self.total_size)

    def vq_code(self, ids):
        return np.asarray(ids) - self.vq_offset

    def bin_index(self, ids):
        return np.asarray(ids) - self.bin_offset

    def vq_ids(self) -> np.ndarray:
        return np.arange(self.vq_offset, self.mask)

    def bin_ids(self) -> np.ndarray:
        return np.arange(self.bin_offset, self.total_size)

    def describe(self, i: int) -> str:
        if i < self.n_text:
            return self.text_tokens[i]
        if i < self.mask:
            return f"<vq{i - self.vq_offset}>"
        special = {self.mask: "[M]", self.exp: "[exp]", self.pad: "[pad]", self.sep: ";"}
        if i in special:
            return special[i]
        return f"<bin{i - self.bin_offset}>"


class Tokenizer:
    """Whole words when known, single characters otherwise. Whitespace is dropped."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in _TOKEN_RE.findall(text):
            if piece in self.vocab._text_index:
                ids.append(self.vocab.text_id(piece))
            else:
                ids.extend(self.vocab.text_id(c) for c in piece)
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.vocab.describe(int(i)) for i in ids)


@dataclass
class SequenceState:
    """A (partially masked) token sequence with per-position branch tags.

    ``frozen`` marks conditioning positions that the forward process never
    masks and the reverse process never decodes.
    """

    tokens: np.ndarray
    branch_tags: np.ndarray
    t: float = 0.0
    grid_shape: tuple[int, int] | None = None
    frozen: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.branch_tags = np.asarray(self.branch_tags, dtype=np.int8)
        if self.tokens.ndim != 1 or self.tokens.shape != self.branch_tags.shape:
            raise ValueError("tokens and branch_tags must be 1-D and equally long")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t={self.t} outside [0, 1]")
        if self.frozen is None:
            self.frozen = np.zeros(len(self.tokens), dtype=bool)
        else:
            self.frozen = np.asarray(self.frozen, dtype=bool)
            if self.frozen.shape != self.tokens.shape:
                raise ValueError("frozen mask has wrong length")

    def __len__(self) -> int:
        return len(self.tokens)

    def copy(self, **changes) -> SequenceState:
        base = dict(
            tokens=self.tokens.copy(),
            branch_tags=self.branch_tags.copy(),
            frozen=self.frozen.copy(),
        )
        base.update(changes)
        return replace(self, **base)

    def masked(self, mask_id: int) -> np.ndarray:
        return self.tokens == mask_id

    def _evolve(self, tokens: np.ndarray, t: float) -> SequenceState:
        # unchecked constructor for hot loops; tags and frozen are shared, not copied
        new = object.__new__(SequenceState)
        new.tokens, new.branch_tags, new.t = tokens, self.branch_tags, t
        new.grid_shape, new.frozen = self.grid_shape, self.frozen
        return new

    @classmethod
    def from_tokens(cls, tokens, vocab: Vocabulary, *, frozen=None, t=0.0, grid_shape=None):
        """Tag VQ ids GEN and everything else UND."""
        tokens = np.asarray(tokens, dtype=np.int64)
        tags = np.where(vocab.is_vq(tokens), GEN, UND).astype(np.int8)
        return cls(tokens, tags, t=t, grid_shape=grid_shape, frozen=frozen)


def concat(*states: SequenceState, t: float | None = None) -> SequenceState:
    grid = next((s.grid_shape for s in states if s.grid_shape is not None), None)
    return SequenceState(
        np.concatenate([s.tokens for s in states]),
        np.concatenate([s.branch_tags for s in states]),
        t=states[-1].t if t is None else t,
        grid_shape=grid,
        frozen=np.concatenate([s.frozen for s in states]),
    )


def check_tags(state: SequenceState, vocab: Vocabulary) -> None:
    """VQ ids must be GEN-tagged; text and specials UND, except GEN-tagged masks."""
    vq = vocab.is_vq(state.tokens)
    gen = state.branch_tags == GEN
    if np.any(vq & ~gen):
        raise ValueError("VQ token tagged UND")
    gen_mask = gen & (state.tokens == vocab.mask)
    if np.any(gen & ~vq & ~gen_mask):
        raise ValueError("non-VQ token tagged GEN")

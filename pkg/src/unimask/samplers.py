"""Unmasking orders for image grids and the policies that consume them.

Orders are permutations of grid cells ``(row, col)``. Policies plug into
:func:`unimask.diffusion.sample` and decide which masked positions a step
reveals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .vocab import GEN, SequenceState


@dataclass(frozen=True)
class UnmaskOrder:
    positions: np.ndarray  # (n_cells, 2) of (row, col)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "positions", pos)

    def flat(self) -> np.ndarray:
        return self.positions[:, 0] * self.grid_shape[1] + self.positions[:, 1]

    def is_permutation(self) -> bool:
        n_cells = self.grid_shape[0] * self.grid_shape[1]
        f = self.flat()
        return len(f) == n_cells and np.array_equal(np.sort(f), np.arange(n_cells))


@dataclass
class CoverageReport:
    depth_coverage: dict[int, int]
    star_discrepancy_estimate: float
    prefix_discrepancy: dict[int, float]


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


def stratified_order(n: int, rng: np.random.Generator) -> UnmaskOrder:
    """Recursive quadrant stratification: the first 4^d picks hit every cell of the 2^d grid."""
    if not _is_pow2(n):
        raise ValueError(f"stratified order needs a power-of-two side >= 2, got {n}")
    occupied = np.zeros((n, n), dtype=bool)
    out = []
    depth = n.bit_length() - 1
    for d in range(1, depth + 1):
        g = 2 ** d
        side = n // g
        for cell in rng.permutation(g * g):
            a, b = divmod(int(cell), g)
            r0, c0 = a * side, b * side
            if occupied[r0:r0 + side, c0:c0 + side].any():
                continue
            i = r0 + int(rng.integers(side))
            j = c0 + int(rng.integers(side))
            occupied[i, j] = True
            out.append((i, j))
    return UnmaskOrder(np.array(out), (n, n))


def radical_inverse(i: int, base: int) -> float:
    f, r = 1.0, 0.0
    while i > 0:
        f /= base
        r += f * (i % base)
        i //= base
    return r


def halton_order(n: int) -> UnmaskOrder:
    """Base-(2, 3) Halton points from index 1, snapped to cells, repeats skipped."""
    if n < 2:
        raise ValueError("n must be >= 2")
    seen = np.zeros((n, n), dtype=bool)
    out = []
    i = 1
    while len(out) < n * n:
        r = int(radical_inverse(i, 2) * n)
        c = int(radical_inverse(i, 3) * n)
        i += 1
        if not seen[r, c]:
            seen[r, c] = True
            out.append((r, c))
    return UnmaskOrder(np.array(out), (n, n))


def uniform_order(n: int, rng: np.random.Generator) -> UnmaskOrder:
    if n < 1:
        raise ValueError("n must be >= 1")
    perm = rng.permutation(n * n)
    return UnmaskOrder(np.stack(np.divmod(perm, n), axis=1), (n, n))


def star_discrepancy(points: np.ndarray, n: int) -> float:
    """Anchored-box discrepancy of cell-centre points, boxes with corners on the n-grid."""
    m = len(points)
    counts = np.zeros((n, n))
    np.add.at(counts, (points[:, 0], points[:, 1]), 1.0)
    frac = counts.cumsum(0).cumsum(1) / m
    edges = np.arange(1, n + 1) / n
    return float(np.abs(frac - np.outer(edges, edges)).max())


def coverage_metrics(order: UnmaskOrder) -> CoverageReport:
    rows, cols = order.grid_shape
    n = min(rows, cols)
    depth = n.bit_length() - 1
    cov, disc = {}, {}
    for d in range(1, depth + 1):
        g = 2 ** d
        m = min(4 ** d, len(order.positions))
        prefix = order.positions[:m]
        cells = (prefix[:, 0] * g // rows) * g + prefix[:, 1] * g // cols
        cov[d] = int(len(np.unique(cells)))
        if rows == cols:
            disc[d] = star_discrepancy(prefix, n)
    mean = float(np.mean(list(disc.values()))) if disc else float("nan")
    return CoverageReport(cov, mean, disc)


def adjacency_rate(step_positions: list[np.ndarray], grid_shape: tuple[int, int]) -> float:
    """Fraction of same-step revealed pairs that are 4-neighbours on the grid."""
    cols = grid_shape[1]
    adjacent = total = 0
    for flat in step_positions:
        flat = np.asarray(flat)
        if len(flat) < 2:
            continue
        r, c = np.divmod(flat, cols)
        dist = np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])
        iu = np.triu_indices(len(flat), 1)
        adjacent += int((dist[iu] == 1).sum())
        total += len(iu[0])
    return adjacent / total if total else 0.0


ORDERS: dict[str, Callable[[int, np.random.Generator], UnmaskOrder]] = {
    "stratified": stratified_order,
    "halton": lambda n, rng: halton_order(n),
    "uniform": uniform_order,
}


def confidence_select(confidence: np.ndarray, candidates: np.ndarray, quota: int) -> np.ndarray:
    """Highest-confidence candidates first; ties go to the lowest flat index."""
    if len(candidates) == 0:
        raise ValueError("no masked positions remain")
    candidates = np.asarray(candidates)
    conf = np.asarray(confidence)[candidates]
    order = np.lexsort((candidates, -conf))
    return candidates[order[:quota]]


class ConfidencePolicy:
    def choose(self, state, confidence, candidates, quota, rng):
        return confidence_select(confidence, candidates, quota)


class RandomPolicy:
    def choose(self, state, confidence, candidates, quota, rng):
        return rng.choice(candidates, size=quota, replace=False)


def image_span(state: SequenceState) -> tuple[int, int] | None:
    """Bounds of the last contiguous GEN run holding non-frozen positions, or None.

    Frozen cells inside the run (a partially repainted image) belong to it.
    """
    gen = state.branch_tags == GEN
    live = np.flatnonzero(gen & ~state.frozen)
    if len(live) == 0:
        return None
    end = int(live[-1]) + 1
    start = end - 1
    while start > 0 and gen[start - 1]:
        start -= 1
    while end < len(gen) and gen[end]:
        end += 1
    return start, end


class GridOrderPolicy:
    """Image masks follow a precomputed grid order; other masks go by confidence.

    When a step has both kinds of candidates the quota is split in proportion
    to their counts.
    """

    def __init__(self, kind: str = "stratified"):
        if kind not in ORDERS:
            raise ValueError(f"unknown order {kind!r}")
        self.kind = kind
        self._cache: dict[tuple, np.ndarray] = {}

    def reset(self) -> None:
        self._cache.clear()

    def _rank(self, state: SequenceState, rng) -> tuple[np.ndarray, int, int] | None:
        span = image_span(state)
        if span is None or state.grid_shape is None:
            return None
        start, stop = span
        rows, cols = state.grid_shape
        if rows * cols != stop - start:
            raise ValueError("grid_shape does not match the image span")
        key = (start, rows, cols)
        if key not in self._cache:
            kind = self.kind
            if kind == "stratified" and (rows != cols or not _is_pow2(rows)):
                warnings.warn("stratified order needs a square power-of-two grid; using uniform")
                kind = "uniform"
            if rows != cols:
                flat = rng.permutation(rows * cols)
            else:
                flat = ORDERS[kind](rows, rng).flat()
            rank = np.empty(rows * cols, dtype=np.int64)
            rank[flat] = np.arange(rows * cols)
            self._cache[key] = rank
        return self._cache[key], start, stop

    def choose(self, state, confidence, candidates, quota, rng):
        ranked = self._rank(state, rng)
        candidates = np.asarray(candidates)
        if ranked is None:
            return confidence_select(confidence, candidates, quota)
        rank, start, stop = ranked
        # generation masks outside the ranked span (a second span) go by confidence
        gen = (state.branch_tags[candidates] == GEN) & (candidates >= start) & (candidates < stop)
        img, txt = candidates[gen], candidates[~gen]
        n_img = quota if len(txt) == 0 else (0 if len(img) == 0 else
                                             min(len(img), int(np.floor(quota * len(img) / len(candidates) + 0.5))))
        n_txt = quota - n_img
        if n_txt > len(txt):
            n_img, n_txt = quota - len(txt), len(txt)
        picked = []
        if n_img:
            picked.append(img[np.argsort(rank[img - start], kind="stable")[:n_img]])
        if n_txt:
            picked.append(confidence_select(confidence, txt, n_txt))
        return np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)


def make_policy(name: str):
    if name == "confidence":
        return ConfidencePolicy()
    if name == "random":
        return RandomPolicy()
    return GridOrderPolicy(name)

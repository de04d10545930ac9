"""Independent reference implementations used to freeze expected values.

Nothing here imports the code under test beyond plain data containers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- reverse chain

def enumerate_mixture_chain(n_pos: int, n_sym: int, steps: list[float], probs_fn) -> dict[tuple, float]:
    """Exact law of the final sequence under the independent-unmask reverse chain.

    State entries are symbols 0..n_sym-1 or -1 for MASK. ``probs_fn(state)``
    gives an (n_pos, n_sym) clean-token distribution. ``steps`` runs 1 -> 0.
    """
    dist = {tuple([-1] * n_pos): 1.0}
    for t, s in zip(steps[:-1], steps[1:]):
        p_un = (t - s) / t
        nxt: dict[tuple, float] = {}
        for state, w in dist.items():
            masked = [i for i, x in enumerate(state) if x == -1]
            probs = probs_fn(state)
            for keep in itertools.product([False, True], repeat=len(masked)):
                chosen = [i for i, k in zip(masked, keep) if k]
                w_sub = w * p_un ** len(chosen) * (1 - p_un) ** (len(masked) - len(chosen))
                if w_sub == 0:
                    continue
                for syms in itertools.product(range(n_sym), repeat=len(chosen)):
                    w_tok = w_sub
                    new = list(state)
                    for i, a in zip(chosen, syms):
                        w_tok *= probs[i, a]
                        new[i] = a
                    nxt[tuple(new)] = nxt.get(tuple(new), 0.0) + w_tok
        dist = nxt
    return dist


def enumerate_quota_random_chain(n_pos: int, n_sym: int, quotas: list[int], probs_fn) -> dict[tuple, float]:
    """Exact law when each step reveals exactly ``quota`` uniformly chosen masked positions."""
    dist = {tuple([-1] * n_pos): 1.0}
    for q in quotas:
        nxt: dict[tuple, float] = {}
        for state, w in dist.items():
            masked = [i for i, x in enumerate(state) if x == -1]
            probs = probs_fn(state)
            subsets = list(itertools.combinations(masked, q))
            for sub in subsets:
                for syms in itertools.product(range(n_sym), repeat=q):
                    w_tok = w / len(subsets)
                    new = list(state)
                    for i, a in zip(sub, syms):
                        w_tok *= probs[i, a]
                        new[i] = a
                    nxt[tuple(new)] = nxt.get(tuple(new), 0.0) + w_tok
        dist = nxt
    return dist


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


# ---------------------------------------------------------------- parameters

def toy_param_count(V, N, M, Hu, Hg, Da, mlp_u, mlp_g, max_len, learned_pos=True, gen_vocab=None, gen_embed=True):
    """Spreadsheet-style count: one line per tensor family."""
    gen_vocab = gen_vocab or V
    rows = {}
    rows["und.embed"] = V * Hu
    rows["und.pos"] = max_len * Hu if learned_pos else 0
    rows["und.qkv"] = N * 3 * Hu * Da
    rows["und.o"] = N * Da * Hu
    rows["und.mlp"] = N * 3 * Hu * mlp_u
    rows["und.norms"] = N * 2 * Hu + Hu
    rows["und.head"] = V * Hu
    rows["gen.embed"] = gen_vocab * Hg if gen_embed else 0
    rows["gen.pos"] = max_len * Hg if learned_pos else 0
    rows["gen.qkv"] = N * 3 * Hg * Da
    rows["gen.o"] = N * Da * Hg
    rows["gen.mlp"] = N * 3 * Hg * mlp_g
    rows["gen.norms"] = N * 2 * Hg + Hg
    rows["gen.head"] = gen_vocab * Hg
    und = sum(v for k, v in rows.items() if k.startswith("und"))
    gen = sum(v for k, v in rows.items() if k.startswith("gen"))
    und_layer = 3 * Hu * Da + Da * Hu + 3 * Hu * mlp_u + 2 * Hu
    und_prefix = rows["und.embed"] + rows["und.pos"] + M * und_layer
    return {"und_only": und, "gen_only": und_prefix + gen, "interleaved": und + gen}


# ---------------------------------------------------------------- discrepancy

def brute_star_discrepancy(cells: np.ndarray, n: int) -> float:
    """max over grid-anchored boxes [0, a/n) x [0, b/n) of |fraction inside - area|."""
    m = len(cells)
    worst = 0.0
    for a in range(1, n + 1):
        for b in range(1, n + 1):
            inside = sum(1 for r, c in cells if r < a and c < b)
            worst = max(worst, abs(inside / m - a * b / n / n))
    return worst


def van_der_corput(i: int, base: int) -> float:
    digits = []
    while i:
        i, d = divmod(i, base)
        digits.append(d)
    return sum(d / base ** (k + 1) for k, d in enumerate(digits))


# ---------------------------------------------------------------- misc

def iou_by_rasterizing(a, b, res: int = 400) -> float:
    xs = (np.arange(res) + 0.5) / res
    X, Y = np.meshgrid(xs, xs)
    ina = (X >= a[0]) & (X < a[2]) & (Y >= a[1]) & (Y < a[3])
    inb = (X >= b[0]) & (X < b[2]) & (Y >= b[1]) & (Y < b[3])
    union = (ina | inb).sum()
    return float((ina & inb).sum() / union) if union else 0.0


def half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_by_pseudocode(n: int, rng) -> list[tuple[int, int]]:
    """Literal transcription of the recursive quadrant loop, one draw per visited cell."""
    out: list[tuple[int, int]] = []
    d = 1
    while 2 ** d <= n:
        g = 2 ** d
        size = n // g
        for cell in rng.permutation(g * g):
            gr, gc = int(cell) // g, int(cell) % g
            box = [(r, c) for r in range(gr * size, (gr + 1) * size) for c in range(gc * size, (gc + 1) * size)]
            if any(p in out for p in box):
                continue
            r = gr * size + int(rng.integers(size))
            c = gc * size + int(rng.integers(size))
            out.append((r, c))
        d += 1
    return out

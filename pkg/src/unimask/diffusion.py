"""Absorbing-state masked diffusion: forward noising, reverse posterior, loss, samplers.

Time runs from 0 (clean) to 1 (all mask). A clean token is masked at time t
with probability t; reverse sampling walks a grid 0 = t_0 < ... < t_K = 1
backwards from the all-mask state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch

from .vocab import UND, SequenceState, concat

log = logging.getLogger(__name__)

Predictor = Callable[[SequenceState], np.ndarray]


class IncompleteDecodeError(RuntimeError):
    def __init__(self, msg: str, state: SequenceState):
        super().__init__(msg)
        self.state = state


class OrderPolicy(Protocol):
    def choose(self, state: SequenceState, confidence: np.ndarray,
               candidates: np.ndarray, quota: int, rng: np.random.Generator) -> np.ndarray:
        ...


@dataclass(frozen=True)
class TimeGrid:
    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.float64)
        if steps.ndim != 1 or len(steps) < 2:
            raise ValueError("a time grid needs at least two timestamps")
        if steps[0] != 0.0 or steps[-1] != 1.0:
            raise ValueError("time grid must start at 0 and end at 1")
        if np.any(np.diff(steps) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "steps", steps)

    @property
    def K(self) -> int:
        return len(self.steps) - 1

    @classmethod
    def uniform(cls, K: int) -> TimeGrid:
        if K < 1:
            raise ValueError("K must be >= 1")
        steps = np.linspace(0.0, 1.0, K + 1)
        steps[0], steps[-1] = 0.0, 1.0
        return cls(steps)


@dataclass
class PredictorOutput:
    logits: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=-1)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def marginal_mask_prob(t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return float(t)


def forward_mask(x0: SequenceState, s: float, t: float, rng: np.random.Generator,
                 *, mask_id: int) -> SequenceState:
    """Noise a state from time s to time t; each clean position masks w.p. (t-s)/(1-s)."""
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
    if abs(x0.t - s) > 1e-12:
        raise ValueError(f"state is at time {x0.t}, not s={s}")
    # one uniform per position, always, so rng consumption depends only on length
    u = rng.random(len(x0))
    out = x0.copy(t=t)
    if s == 1.0:
        return out
    p = (t - s) / (1.0 - s)
    hit = (u < p) & ~x0.frozen & (x0.tokens != mask_id)
    out.tokens[hit] = mask_id
    return out


def reverse_posterior(x0_probs: np.ndarray, xt: SequenceState, s: float, t: float,
                      *, mask_id: int) -> np.ndarray:
    """Per-position categorical over the vocabulary for X_s given X_t and a clean guess."""
    if t == 0:
        raise ValueError("posterior undefined at t = 0")
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    x0_probs = np.asarray(x0_probs, dtype=np.float64)
    L, V = x0_probs.shape
    if L != len(xt):
        raise ValueError("x0_probs and xt lengths differ")
    out = np.zeros((L, V))
    masked = xt.tokens == mask_id
    keep = np.flatnonzero(~masked)
    out[keep, xt.tokens[keep]] = 1.0
    out[masked] = (t - s) / t * x0_probs[masked]
    out[masked, mask_id] += s / t
    return out


def masked_nll(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor,
               t: torch.Tensor | float) -> torch.Tensor:
    """Batched (1/t) * sum over masked positions of -log p(target); mean over the batch.

    logits (..., L, V), targets/masked (..., L), t scalar or (...,).
    """
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    per_seq = (nll * masked.to(nll.dtype)).sum(-1)
    t = torch.as_tensor(t, dtype=per_seq.dtype)
    return (per_seq / t).mean()


def mdm_loss(x0: SequenceState, xt: SequenceState, logits, t: float, *, mask_id: int):
    """Masked-diffusion loss for one sequence. Returns a torch scalar (differentiable)."""
    if t <= 0:
        raise ValueError("loss undefined at t = 0")
    if len(x0) != len(xt):
        raise ValueError("x0 and xt lengths differ")
    logits = torch.as_tensor(logits)
    if logits.shape[0] != len(x0):
        raise ValueError("logits length differs from sequence length")
    targets = torch.as_tensor(x0.tokens)
    masked = torch.as_tensor(xt.tokens == mask_id)
    return masked_nll(logits, targets, masked, t)


def step_quotas(L: int, grid: TimeGrid) -> list[int]:
    """Tokens revealed on each reverse step, in execution order (t_K -> t_0).

    round(L * (t_k - t_{k-1})) per step, capped so the running total never
    exceeds L; whatever is left goes to the final step.
    """
    K = grid.K
    quotas = []
    remaining = L
    for k in range(K, 1, -1):
        q = min(_round_half_up(L * (grid.steps[k] - grid.steps[k - 1])), remaining)
        quotas.append(q)
        remaining -= q
    quotas.append(remaining)
    return quotas


def _choose_tokens(logits: np.ndarray, positions: np.ndarray, temperature: float,
                   rng: np.random.Generator, mask_id: int) -> np.ndarray:
    rows = np.array(logits[positions], dtype=np.float64)
    rows[:, mask_id] = -np.inf
    if temperature == 0:
        return rows.argmax(axis=-1)
    p = softmax(rows, temperature)
    u = rng.random(len(positions))
    idx = (p.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def _call(model: Predictor, state: SequenceState, vocab_size: int | None) -> np.ndarray:
    logits = np.asarray(model(state))
    if logits.ndim != 2 or logits.shape[0] != len(state):
        raise ValueError(f"model returned shape {logits.shape} for length {len(state)}")
    if vocab_size is not None and logits.shape[1] != vocab_size:
        raise ValueError("model vocabulary size mismatch")
    return logits


def _with_response(prompt: SequenceState, length: int | None, response_tags, mask_id: int):
    if length is None:
        return prompt.copy(t=1.0)
    if len(prompt) == 0 and response_tags is None:
        return SequenceState(np.full(length, mask_id), np.full(length, UND, dtype=np.int8),
                             t=1.0, grid_shape=prompt.grid_shape)
    tags = np.full(length, UND, dtype=np.int8) if response_tags is None else np.asarray(response_tags)
    resp = SequenceState(np.full(length, mask_id), tags, t=1.0)
    frozen_prompt = prompt.copy(frozen=np.ones(len(prompt), dtype=bool))
    return concat(frozen_prompt, resp, t=1.0)


def sample(model: Predictor, prompt: SequenceState, grid: TimeGrid, order_policy: OrderPolicy | None,
           rng: np.random.Generator, *, mask_id: int, length: int | None = None,
           response_tags=None, mode: str = "quota", temperature: float = 0.0,
           on_step: Callable[[int, SequenceState, np.ndarray], None] | None = None) -> SequenceState:
    """Reverse-diffuse every MASK position of ``prompt`` (plus ``length`` appended masks).

    ``mode="quota"`` reveals a fixed number of positions per step, picked by
    ``order_policy``; ``mode="mixture"`` unmasks each masked position
    independently with probability (t-s)/t.
    """
    if mode not in ("quota", "mixture"):
        raise ValueError(f"unknown mode {mode!r}")
    if order_policy is None and mode == "quota":
        from .samplers import ConfidencePolicy
        order_policy = ConfidencePolicy()
    if hasattr(order_policy, "reset"):
        order_policy.reset()
    state = _with_response(prompt, length, response_tags, mask_id)
    free = ~state.frozen
    open_ = (state.tokens == mask_id) & free
    quotas = step_quotas(int(open_.sum()), grid) if mode == "quota" else None

    for step, k in enumerate(range(grid.K, 0, -1)):
        t, s = grid.steps[k], grid.steps[k - 1]
        logits = _call(model, state, None)
        cand = np.flatnonzero((state.tokens == mask_id) & free)
        if mode == "quota":
            q = quotas[step]
            if q > len(cand):
                raise IncompleteDecodeError("sampler ran out of masked positions", state)
            if q == 0:
                chosen = np.empty(0, dtype=np.int64)
            else:
                conf = PredictorOutput(logits[cand]).confidence
                full_conf = np.full(len(state), -np.inf)
                full_conf[cand] = conf
                chosen = np.asarray(order_policy.choose(state, full_conf, cand, q, rng), dtype=np.int64)
                if len(chosen) != q or len(np.unique(chosen)) != q or not np.all(np.isin(chosen, cand)):
                    raise IncompleteDecodeError("order policy returned an invalid selection", state)
        else:
            u = rng.random(len(cand))
            chosen = cand[u < (t - s) / t]
        tokens = state.tokens.copy()
        if len(chosen):
            tokens[chosen] = _choose_tokens(logits, chosen, temperature, rng, mask_id)
        state = state._evolve(tokens, float(s))
        if on_step is not None:
            on_step(step, state, chosen)

    if np.any((state.tokens == mask_id) & ~state.frozen):
        raise IncompleteDecodeError("masks remain after the final step", state)
    return state


def threshold_decode(model: Predictor, prompt: SequenceState, threshold: float, max_steps: int,
                     rng: np.random.Generator, *, mask_id: int, length: int | None = None,
                     response_tags=None, temperature: float = 0.0) -> tuple[SequenceState, int]:
    """Unmask every position whose confidence clears ``threshold``; at least one per step.

    Returns the final state and the number of steps (= model calls) used.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    state = _with_response(prompt, length, response_tags, mask_id)
    n_open = max(int(((state.tokens == mask_id) & ~state.frozen).sum()), 1)
    steps = 0
    while True:
        cand = np.flatnonzero((state.tokens == mask_id) & ~state.frozen)
        if len(cand) == 0:
            return state.copy(t=0.0), steps
        if steps >= max_steps:
            raise IncompleteDecodeError(f"{len(cand)} masks left after {max_steps} steps", state)
        logits = _call(model, state, None)
        conf = PredictorOutput(logits[cand]).confidence
        pick = cand[conf >= threshold]
        if len(pick) == 0:
            pick = cand[[int(np.argmax(conf))]]
        steps += 1
        new = state.copy(t=(len(cand) - len(pick)) / n_open)
        new.tokens[pick] = _choose_tokens(logits, pick, temperature, rng, mask_id)
        state = new

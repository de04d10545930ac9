import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from unimask.diffusion import (IncompleteDecodeError, PredictorOutput, TimeGrid, forward_mask, marginal_mask_prob,
                               mdm_loss, reverse_posterior, sample, step_quotas, threshold_decode)
from unimask.samplers import ConfidencePolicy, RandomPolicy
from unimask.vocab import UND, SequenceState

from .oracles import half_up

MASK = 16  # toy vocabulary: 16 symbols plus the mask id
V = 17


def clean(L, seed=0):
    rng = np.random.default_rng(seed)
    return SequenceState(rng.integers(0, 16, L), np.full(L, UND))


class TableModel:
    """Fixed logits per position, independent of the state."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.calls = 0

    def __call__(self, state):
        self.calls += 1
        return self.logits[: len(state)]


def peaked_logits(L, seed=0, scale=3.0):
    rng = np.random.default_rng(seed)
    out = rng.normal(size=(L, V)) * scale
    out[:, MASK] = -np.inf
    return out


# ------------------------------------------------------------------ forward


def test_marginal_mask_prob():
    assert marginal_mask_prob(0.0) == 0.0
    assert marginal_mask_prob(1.0) == 1.0
    assert marginal_mask_prob(0.37) == 0.37
    with pytest.raises(ValueError):
        marginal_mask_prob(1.2)


def test_forward_endpoints(rng):
    x0 = clean(50)
    assert np.array_equal(forward_mask(x0, 0.0, 0.0, rng, mask_id=MASK).tokens, x0.tokens)
    assert np.all(forward_mask(x0, 0.0, 1.0, rng, mask_id=MASK).tokens == MASK)


def test_forward_from_one_is_identity(rng):
    x1 = SequenceState(np.full(5, MASK), np.full(5, UND), t=1.0)
    out = forward_mask(x1, 1.0, 1.0, rng, mask_id=MASK)
    assert np.array_equal(out.tokens, x1.tokens) and out.t == 1.0


def test_forward_rejects_bad_times(rng):
    x0 = clean(4)
    with pytest.raises(ValueError):
        forward_mask(x0, 0.5, 0.2, rng, mask_id=MASK)
    with pytest.raises(ValueError):
        forward_mask(x0, 0.3, 0.5, rng, mask_id=MASK)  # x0 lives at t=0


def test_forward_rate_at_03():
    rng = np.random.default_rng(0)
    x0 = clean(10_000)
    rate = np.mean([np.mean(forward_mask(x0, 0.0, 0.3, rng, mask_id=MASK).tokens == MASK) for _ in range(1000)])
    assert abs(rate - 0.3) <= 0.01


def test_forward_composition_matches_marginal():
    rng = np.random.default_rng(1)
    x0 = clean(1000)
    s, t, n = 0.2, 0.6, 100
    hits = 0
    for _ in range(n):
        xs = forward_mask(x0, 0.0, s, rng, mask_id=MASK)
        xt = forward_mask(xs, s, t, rng, mask_id=MASK)
        assert np.all(xt.tokens[xs.tokens == MASK] == MASK)  # absorbing
        hits += int(np.sum(xt.tokens == MASK))
    total = n * len(x0)
    sigma = math.sqrt(t * (1 - t) / total)
    assert abs(hits / total - t) <= 3 * sigma


def test_forward_never_masks_frozen(rng):
    x0 = clean(20)
    x0 = x0.copy(frozen=np.arange(20) < 10)
    xt = forward_mask(x0, 0.0, 1.0, rng, mask_id=MASK)
    assert np.array_equal(xt.tokens[:10], x0.tokens[:10])
    assert np.all(xt.tokens[10:] == MASK)


@given(st.integers(1, 40), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_forward_rng_consumption_depends_on_length_only(L, t, seed):
    a, b = np.random.default_rng(seed), np.random.default_rng(seed)
    forward_mask(clean(L), 0.0, t, a, mask_id=MASK)
    forward_mask(clean(L, seed=1), 0.0, 0.0, b, mask_id=MASK)
    assert a.random() == b.random()


# ------------------------------------------------------------------ posterior


def test_posterior_worked_example():
    xt = SequenceState([MASK], [UND], t=1.0)
    probs = np.zeros((1, V))
    probs[0, 3] = 1.0
    post = reverse_posterior(probs, xt, 0.5, 1.0, mask_id=MASK)
    assert post[0, 3] == pytest.approx(0.5) and post[0, MASK] == pytest.approx(0.5)


def test_posterior_uniform_example():
    xt = SequenceState([MASK], [UND], t=0.8)
    probs = np.zeros((1, V))
    probs[0, :4] = 0.25
    post = reverse_posterior(probs, xt, 0.2, 0.8, mask_id=MASK)
    assert np.allclose(post[0, :4], 0.1875) and post[0, MASK] == pytest.approx(0.25)


def test_posterior_carry_over_and_errors():
    xt = SequenceState([5, MASK], [UND, UND], t=0.5)
    post = reverse_posterior(np.full((2, V), 1 / V), xt, 0.1, 0.5, mask_id=MASK)
    assert post[0, 5] == 1.0 and post[0].sum() == 1.0
    with pytest.raises(ValueError):
        reverse_posterior(np.full((2, V), 1 / V), xt, 0.0, 0.0, mask_id=MASK)


@given(st.floats(0.01, 1.0), st.floats(0.0, 0.99), st.integers(0, 1000))
def test_posterior_normalized(t, frac, seed):
    s = t * frac
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(V), size=6)
    tokens = np.where(rng.random(6) < 0.5, MASK, rng.integers(0, 16, 6))
    post = reverse_posterior(probs, SequenceState(tokens, np.full(6, UND), t=t), s, t, mask_id=MASK)
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-9)


# ------------------------------------------------------------------ loss


def test_loss_uniform_closed_form():
    x0 = SequenceState(np.arange(8), np.full(8, UND))
    xt = x0.copy(tokens=np.where(np.arange(8) < 5, MASK, x0.tokens), t=0.5)
    logits = torch.zeros(8, 16)
    assert float(mdm_loss(x0, xt, logits, 0.5, mask_id=MASK)) == pytest.approx(2 * 5 * math.log(16))


def test_loss_perfect_prediction_is_zero():
    x0 = clean(6)
    xt = x0.copy(tokens=np.full(6, MASK), t=0.4)
    logits = torch.full((6, V), -1e9)
    logits[torch.arange(6), torch.as_tensor(x0.tokens)] = 0.0
    assert float(mdm_loss(x0, xt, logits, 0.4, mask_id=MASK)) == pytest.approx(0.0, abs=1e-9)


def test_loss_errors():
    x0 = clean(3)
    with pytest.raises(ValueError):
        mdm_loss(x0, x0, torch.zeros(3, V), 0.0, mask_id=MASK)
    with pytest.raises(ValueError):
        mdm_loss(x0, clean(4), torch.zeros(3, V), 0.5, mask_id=MASK)


def test_loss_gradient_wrt_logits():
    x0 = SequenceState([1, 2, 3], [UND] * 3)
    xt = x0.copy(tokens=np.array([MASK, 2, MASK]), t=0.6)
    logits = torch.randn(3, V, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
    mdm_loss(x0, xt, logits, 0.6, mask_id=MASK).backward()
    eps = 1e-6
    num = torch.zeros_like(logits)
    with torch.no_grad():
        for idx in np.ndindex(*logits.shape):
            d = torch.zeros_like(logits)
            d[idx] = eps
            num[idx] = (mdm_loss(x0, xt, logits + d, 0.6, mask_id=MASK)
                        - mdm_loss(x0, xt, logits - d, 0.6, mask_id=MASK)) / (2 * eps)
    err = (logits.grad - num).abs() / torch.clamp(torch.maximum(logits.grad.abs(), num.abs()), min=1e-8)
    assert float(err.max()) <= 1e-4


# ------------------------------------------------------------------ quotas


def test_quota_examples():
    assert step_quotas(10, TimeGrid.uniform(4)) == [3, 3, 3, 1]
    assert step_quotas(1, TimeGrid.uniform(3)) == [0, 0, 1]
    assert step_quotas(3, TimeGrid([0.0, 0.1, 1.0])) == [3, 0]
    assert step_quotas(7, TimeGrid.uniform(1)) == [7]
    assert step_quotas(5, TimeGrid.uniform(5)) == [1] * 5


@given(st.integers(0, 300), st.lists(st.floats(0.001, 1.0), min_size=1, max_size=20))
def test_quotas_sum_and_follow_rule(L, gaps):
    steps = np.concatenate([[0.0], np.cumsum(gaps)])
    steps /= steps[-1]
    steps[-1] = 1.0
    if np.any(np.diff(steps) <= 0):
        return
    grid = TimeGrid(steps)
    q = step_quotas(L, grid)
    assert sum(q) == L and min(q) >= 0 and len(q) == grid.K
    # every step but the last follows round-half-up unless the cap binds
    remaining = L
    for k, qk in zip(range(grid.K, 1, -1), q[:-1]):
        assert qk == min(half_up(L * (grid.steps[k] - grid.steps[k - 1])), remaining)
        remaining -= qk


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ValueError):
        TimeGrid([0.1, 1.0])
    with pytest.raises(ValueError):
        TimeGrid.uniform(0)


def test_confidence_is_max_softmax():
    logits = np.array([[0.0, math.log(3.0)]])
    assert PredictorOutput(logits).confidence[0] == pytest.approx(0.75)


# ------------------------------------------------------------------ sampling


def empty_prompt():
    return SequenceState(np.zeros(0, dtype=np.int64), np.zeros(0))


def test_sample_one_step_reveals_everything(rng):
    m = TableModel(peaked_logits(12))
    out = sample(m, empty_prompt(), TimeGrid.uniform(1), None, rng, mask_id=MASK, length=12)
    assert m.calls == 1 and not np.any(out.tokens == MASK)


def test_sample_sequential_schedule(rng):
    m = TableModel(peaked_logits(9))
    seen = []
    sample(m, empty_prompt(), TimeGrid.uniform(9), None, rng, mask_id=MASK, length=9,
           on_step=lambda k, st_, chosen: seen.append(len(chosen)))
    assert m.calls == 9 and seen == [1] * 9


def test_sample_greedy_matches_argmax_and_keeps_prompt(rng):
    logits = peaked_logits(10)
    prompt = SequenceState([1, 2, 3], [UND] * 3)
    out = sample(TableModel(logits), prompt, TimeGrid.uniform(3), None, rng, mask_id=MASK, length=7)
    assert np.array_equal(out.tokens[:3], [1, 2, 3])
    assert np.array_equal(out.tokens[3:], logits[3:10].argmax(axis=1))


def test_sample_never_changes_revealed_tokens(rng):
    logits = peaked_logits(16, seed=3)
    history = []

    def on_step(k, state, chosen):
        history.append(state.tokens.copy())

    sample(TableModel(logits), empty_prompt(), TimeGrid.uniform(5), RandomPolicy(), rng, mask_id=MASK,
           length=16, temperature=1.0, on_step=on_step)
    for a, b in zip(history, history[1:]):
        keep = a != MASK
        assert np.array_equal(a[keep], b[keep])


def test_sample_never_emits_mask(rng):
    logits = np.zeros((5, V))
    logits[:, MASK] = 100.0
    out = sample(TableModel(logits), empty_prompt(), TimeGrid.uniform(2), None, rng, mask_id=MASK, length=5)
    assert not np.any(out.tokens == MASK)


def test_sample_mixture_mode_ends_mask_free(rng):
    out = sample(TableModel(peaked_logits(20)), empty_prompt(), TimeGrid.uniform(4), None, rng, mask_id=MASK,
                 length=20, mode="mixture", temperature=1.0)
    assert not np.any(out.tokens == MASK)


def test_sample_shape_mismatch(rng):
    with pytest.raises(ValueError):
        sample(lambda s: np.zeros((2, V)), empty_prompt(), TimeGrid.uniform(1), None, rng, mask_id=MASK, length=3)


def test_sample_bad_policy_raises_with_state(rng):
    class Greedy:
        def choose(self, state, conf, cand, quota, rng):
            return cand[:1]  # ignores the quota

    with pytest.raises(IncompleteDecodeError) as e:
        sample(TableModel(peaked_logits(6)), empty_prompt(), TimeGrid.uniform(2), Greedy(), rng, mask_id=MASK,
               length=6)
    assert len(e.value.state) == 6


def test_sample_deterministic_given_seed():
    logits = peaked_logits(12, scale=0.5)
    a = sample(TableModel(logits), empty_prompt(), TimeGrid.uniform(4), RandomPolicy(), np.random.default_rng(7),
               mask_id=MASK, length=12, temperature=1.0)
    b = sample(TableModel(logits), empty_prompt(), TimeGrid.uniform(4), RandomPolicy(), np.random.default_rng(7),
               mask_id=MASK, length=12, temperature=1.0)
    assert np.array_equal(a.tokens, b.tokens)


# ------------------------------------------------------------------ threshold decoding


def test_threshold_one_is_sequential(rng):
    m = TableModel(peaked_logits(7, scale=0.3))
    out, steps = threshold_decode(m, empty_prompt(), 1.0, 100, rng, mask_id=MASK, length=7)
    assert steps == 7 and m.calls == 7 and not np.any(out.tokens == MASK)


def test_threshold_tiny_is_one_step(rng):
    _, steps = threshold_decode(TableModel(peaked_logits(7)), empty_prompt(), 1e-9, 100, rng, mask_id=MASK, length=7)
    assert steps == 1


def test_threshold_exhaustion_carries_partial_state(rng):
    with pytest.raises(IncompleteDecodeError) as e:
        threshold_decode(TableModel(peaked_logits(7, scale=0.3)), empty_prompt(), 1.0, 3, rng, mask_id=MASK, length=7)
    assert int(np.sum(e.value.state.tokens == MASK)) == 4


def test_threshold_validation(rng):
    with pytest.raises(ValueError):
        threshold_decode(TableModel(peaked_logits(2)), empty_prompt(), 0.0, 3, rng, mask_id=MASK, length=2)


def test_confidence_policy_ties_pick_lowest_index(rng):
    m = TableModel(np.zeros((6, V)))
    chosen = []
    sample(m, empty_prompt(), TimeGrid.uniform(3), ConfidencePolicy(), rng, mask_id=MASK, length=6,
           on_step=lambda k, s, c: chosen.append(sorted(c.tolist())))
    assert chosen == [[0, 1], [2, 3], [4, 5]]

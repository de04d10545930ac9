import csv

import numpy as np
import pytest
import torch

from unimask.backbone import TaskMode, build_model, load_checkpoint
from unimask.diffusion import mdm_loss
from unimask.grounding import dequantize
from unimask.tasks import PALETTE, SyntheticTask, TaskKind, cell_box, cells_in_box, make_task
from unimask.train import (DivergenceError, TrainConfig, batch_loss, default_model_config, make_batch,
                           noisy_pair, train_toy)
from unimask.vocab import GEN, SequenceState, check_tags


@pytest.mark.parametrize("kind", list(TaskKind))
def test_examples_are_exactly_scorable(kind):
    task = make_task(kind)
    rng = np.random.default_rng(0)
    for _ in range(20):
        ex = task.sample(rng)
        check_tags(ex.x0, task.vocab)
        assert np.array_equal(ex.x0.tokens[:len(ex.prompt)], ex.prompt.tokens)
        if kind is TaskKind.FIND_CELL:
            boxes = [dequantize(q) for q in ex.meta["boxes"]]
            assert task.quality(ex, ex.x0, boxes) == 1.0
        elif kind is TaskKind.LUMA:
            assert task.quality(ex, ex.x0) == pytest.approx(ex.meta["luminance"])
        else:
            assert task.quality(ex, ex.x0) == 1.0


def test_grid_quality_rejects_wrong_images():
    task = make_task("grid_pattern")
    ex = task.sample(np.random.default_rng(1))
    bad = ex.x0.copy()
    gen = np.flatnonzero(bad.branch_tags == GEN)
    bad.tokens[gen[0]] = task.vocab.vq_id(0)  # black never appears
    assert task.quality(ex, bad) == 0.0


def test_place_success_rule():
    task = make_task("place")
    codes = np.zeros((4, 4), dtype=int)
    codes[0, 3] = 2
    assert task.place_success(codes, 2, 1)
    assert not task.place_success(codes, 2, 0)
    codes[3, 3] = 2
    assert not task.place_success(codes, 2, 1)


def test_cells_in_box():
    assert cells_in_box(cell_box(1, 2, 4), 4).sum() == 1
    assert cells_in_box(cell_box(1, 2, 4), 4)[1, 2]


def test_task_validation():
    with pytest.raises(ValueError):
        SyntheticTask(TaskKind.GRID_PATTERN, n=3)
    assert len(PALETTE) == 12


def test_batch_loss_matches_per_example_loss():
    task = make_task("caption")
    model = build_model(default_model_config(task), seed=0)
    batch = make_batch(task, 3, np.random.default_rng(0), 0.02)
    with torch.no_grad():
        got = float(batch_loss(model, batch))
        ref = []
        for i in range(3):
            keep = ~batch.pad[i]
            tokens = batch.tokens[i][keep]
            logits = model(tokens[None], batch.gen[i][keep][None], TaskMode.INTERLEAVED)[0]
            x0 = SequenceState(batch.targets[i][keep].numpy(), batch.gen[i][keep].numpy().astype(int))
            xt = x0.copy(tokens=tokens.numpy())
            ref.append(float(mdm_loss(x0, xt, logits, float(batch.t[i]), mask_id=task.vocab.mask)))
    assert got == pytest.approx(np.mean(ref), rel=1e-5)


def test_noisy_pair_interleaved_lengths_agree():
    task = make_task("place")
    rng = np.random.default_rng(3)
    for _ in range(50):
        ex = task.sample(rng)
        xt, target = noisy_pair(ex, float(rng.random()), rng, task.vocab.mask, task.vocab)
        assert len(xt) == len(target)


def test_zero_steps_returns_init(tmp_path):
    task = make_task("caption")
    res = train_toy(task, TrainConfig(steps=0, seed=3, eval_size=4), tmp_path)
    init = build_model(default_model_config(task), seed=3)
    loaded = load_checkpoint(res.checkpoint)
    for a, b in zip(init.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)
    assert res.losses == [] and res.initial_eval == res.final_eval


def test_training_is_deterministic(tmp_path):
    task = make_task("caption")
    cfg = TrainConfig(steps=15, seed=1, eval_size=8)
    a = train_toy(task, cfg, tmp_path / "a")
    b = train_toy(task, cfg, tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a" / "loss.csv")))
    assert rows[0] == ["step", "loss"] and len(rows) == 1 + 15 + 2
    assert [float(r[1]) for r in rows[1:16]] == a.losses


def test_sgd_option_runs():
    res = train_toy(make_task("caption"), TrainConfig(steps=5, optimizer="sgd", lr=0.05, eval_size=4))
    assert len(res.losses) == 5 and all(np.isfinite(res.losses))


def test_divergence_is_reported():
    task = make_task("caption")
    model = build_model(default_model_config(task), seed=0)
    with torch.no_grad():
        model.und.head.weight[0, 0] = float("nan")
    with pytest.raises(DivergenceError, match="step 0"):
        train_toy(task, TrainConfig(steps=3, eval_size=2), model=model)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(t_min=0.0)


def test_task_mix_follows_weights():
    from unimask.tasks import TaskMix
    mix = TaskMix({"grid_pattern": 3, "caption": 1})
    rng = np.random.default_rng(0)
    n_caption = sum(len(mix.sample(rng).prompt) > 2 for _ in range(400))
    assert abs(n_caption / 400 - 0.25) < 0.07
    only = TaskMix({"caption": 1, "grid_pattern": 0})
    assert all(len(only.sample(rng).prompt) > 2 for _ in range(20))
    for bad in ({}, {"caption": -1}, {"caption": 0}):
        with pytest.raises(ValueError):
            TaskMix(bad)
    res = train_toy(mix, TrainConfig(steps=3, seed=0))
    assert len(res.losses) == 3

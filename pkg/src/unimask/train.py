"""Toy training loop for the synthetic tasks."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ElasticMoT, ModelConfig, TaskMode, build_model, save_checkpoint
from .diffusion import forward_mask
from .modality import interleaved_forward, loss_target
from .tasks import Example, SyntheticTask
from .vocab import GEN, SequenceState

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimizer and schedule.

    ``optimizer`` is "adamw" (default, betas 0.99/0.999) or "sgd" (heavy-ball
    momentum). ``t_min`` bounds the sampled time away from 0 where the 1/t
    weight explodes.
    """

    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.99, 0.999)
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    t_min: float = 0.02
    eval_size: int = 64
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must be in (0, 1)")
        self.betas = tuple(self.betas)


@dataclass
class Batch:
    tokens: torch.Tensor
    gen: torch.Tensor
    pad: torch.Tensor
    targets: torch.Tensor
    masked: torch.Tensor
    t: torch.Tensor


def noisy_pair(ex: Example, t: float, rng: np.random.Generator, mask_id: int, vocab) -> tuple[SequenceState, SequenceState]:
    """(X_t, loss target) for one example."""
    if ex.t_exp is not None:
        xt = interleaved_forward(ex.x0, ex.t_exp, t, rng, vocab=vocab)
        return xt, loss_target(ex.x0, ex.t_exp, t, vocab=vocab)
    xt = forward_mask(ex.x0.copy(t=0.0), 0.0, t, rng, mask_id=mask_id)
    return xt, ex.x0


def collate(pairs: list[tuple[SequenceState, SequenceState]], ts, pad_id: int, mask_id: int) -> Batch:
    L = max(len(xt) for xt, _ in pairs)
    B = len(pairs)
    tokens = np.full((B, L), pad_id, dtype=np.int64)
    targets = np.full((B, L), pad_id, dtype=np.int64)
    gen = np.zeros((B, L), dtype=bool)
    pad = np.ones((B, L), dtype=bool)
    for i, (xt, x0) in enumerate(pairs):
        n = len(xt)
        tokens[i, :n] = xt.tokens
        targets[i, :n] = x0.tokens
        gen[i, :n] = xt.branch_tags == GEN
        pad[i, :n] = False
    masked = (tokens == mask_id) & ~pad
    return Batch(torch.from_numpy(tokens), torch.from_numpy(gen), torch.from_numpy(pad),
                 torch.from_numpy(targets), torch.from_numpy(masked), torch.tensor(np.asarray(ts, dtype=np.float32)))


def make_batch(task: SyntheticTask, n: int, rng: np.random.Generator, t_min: float) -> Batch:
    v = task.vocab
    pairs, ts = [], []
    for _ in range(n):
        ex = task.sample(rng)
        t = float(t_min + (1.0 - t_min) * rng.random())
        pairs.append(noisy_pair(ex, t, rng, v.mask, v))
        ts.append(t)
    return collate(pairs, ts, v.pad, v.mask)


def batch_loss(model: ElasticMoT, batch: Batch) -> torch.Tensor:
    """Same value as masked_nll on full logits, projecting only the masked rows."""
    flat = torch.nonzero(batch.masked.reshape(-1)).squeeze(1)
    logits = model(batch.tokens, batch.gen, TaskMode.INTERLEAVED, batch.pad, rows=flat)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, batch.targets.reshape(-1)[flat].unsqueeze(-1)).squeeze(-1)
    per_seq = torch.zeros(batch.tokens.shape[0], dtype=nll.dtype).index_add(
        0, flat // batch.tokens.shape[1], nll)
    return (per_seq / batch.t.to(nll.dtype)).mean()


@dataclass
class TrainResult:
    model: ElasticMoT
    losses: list[float]
    initial_eval: float
    final_eval: float
    checkpoint: Path | None = None


# Recipes for the toy models used by the end-to-end tests and scripts; sized for one CPU core.
TOY_RECIPES = {
    "grid_pattern": dict(steps=1500, betas=(0.9, 0.999)),
    "find_cell": dict(steps=1000, batch_size=64, betas=(0.9, 0.999)),
    "place": dict(steps=1000, batch_size=64, betas=(0.9, 0.999)),
    "luma": dict(steps=600),
    "caption": dict(steps=400, betas=(0.9, 0.999)),
}


def default_model_config(task: SyntheticTask, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=task.vocab.total_size, **overrides)


def _optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train_toy(task: SyntheticTask, cfg: TrainConfig, out_dir: str | Path | None = None,
              model: ElasticMoT | None = None) -> TrainResult:
    """Sample t, noise, score, step. Writes ``loss.csv`` and ``model.ckpt`` when ``out_dir`` is set."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    if model is None:
        model = build_model(default_model_config(task, **cfg.model), seed=cfg.seed)
    opt = _optimizer(model, cfg)
    eval_batch = make_batch(task, cfg.eval_size, eval_rng, cfg.t_min)

    def evaluate() -> float:
        model.eval()
        with torch.no_grad():
            return float(batch_loss(model, eval_batch))

    initial = evaluate()
    losses = []
    model.train()
    for step in range(cfg.steps):
        batch = make_batch(task, cfg.batch_size, rng, cfg.t_min)
        loss = batch_loss(model, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step} (lr={cfg.lr})")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        losses.append(value)
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, value)
    model.eval()
    final = evaluate()
    result = TrainResult(model, losses, initial, final)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_csv(losses, out / "loss.csv", initial, final)
        result.checkpoint = out / "model.ckpt"
        save_checkpoint(model, result.checkpoint)
    return result


def write_loss_csv(losses, path, initial: float | None = None, final: float | None = None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
        if initial is not None:
            w.writerow(["eval_initial", repr(float(initial))])
            w.writerow(["eval_final", repr(float(final))])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

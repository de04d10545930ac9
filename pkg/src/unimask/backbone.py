"""Toy Elastic Mixture-of-Transformers.

Two branches share one attention space of width ``attn_dim``: a wide
understanding (UND) branch and a narrower generation (GEN) branch. The first
``joint_layers`` layers attend across all positions; later layers only attend
within a branch. Depending on the task mode only part of the weights is
touched, which is what makes partial loading possible.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .vocab import GEN, SequenceState


class TaskMode(enum.Enum):
    UND_ONLY = "und_only"
    GEN_ONLY = "gen_only"
    INTERLEAVED = "interleaved"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 8
    joint_layers: int = 4
    und_width: int = 64
    gen_width: int = 32
    attn_dim: int = 64
    n_heads: int = 2
    und_mlp: int = 192
    gen_mlp: int = 128
    max_len: int = 128
    learned_positions: bool = True
    # accounting-only knobs; the toy model always uses the shared vocabulary
    gen_vocab_size: int | None = None
    gen_input_embedding: bool = True

    def __post_init__(self):
        if not 0 <= self.joint_layers <= self.n_layers:
            raise ValueError("need 0 <= joint_layers <= n_layers")
        if self.gen_width > self.und_width:
            raise ValueError("generation branch cannot be wider than understanding branch")
        if self.gen_mlp > self.und_mlp:
            raise ValueError("generation MLP cannot be wider than understanding MLP")
        if self.attn_dim % self.n_heads:
            raise ValueError("attn_dim must divide evenly into heads")

    @property
    def decoupled_layers(self) -> int:
        return self.n_layers - self.joint_layers

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        return cls(**json.loads(text))


LARGE_CONFIG = ModelConfig(
    vocab_size=126464, n_layers=32, joint_layers=16, und_width=4096, gen_width=2048,
    attn_dim=4096, n_heads=32, und_mlp=12288, gen_mlp=8192, max_len=8192,
    learned_positions=False, gen_vocab_size=8192, gen_input_embedding=False,
)


def standard_mot(config: ModelConfig) -> ModelConfig:
    """Same model with a full-size generation copy and joint attention everywhere."""
    return replace(config, gen_width=config.und_width, gen_mlp=config.und_mlp,
                   joint_layers=config.n_layers,
                   gen_vocab_size=config.gen_vocab_size)


class RMSNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width))
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class BranchLayer(nn.Module):
    def __init__(self, width: int, attn_dim: int, mlp: int):
        super().__init__()
        self.attn_norm = RMSNorm(width)
        self.q = nn.Linear(width, attn_dim, bias=False)
        self.k = nn.Linear(width, attn_dim, bias=False)
        self.v = nn.Linear(width, attn_dim, bias=False)
        self.o = nn.Linear(attn_dim, width, bias=False)
        self.mlp_norm = RMSNorm(width)
        self.gate = nn.Linear(width, mlp, bias=False)
        self.up = nn.Linear(width, mlp, bias=False)
        self.down = nn.Linear(mlp, width, bias=False)

    def qkv(self, h):
        x = self.attn_norm(h)
        return self.q(x), self.k(x), self.v(x)

    def mlp(self, h):
        x = self.mlp_norm(h)
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Branch(nn.Module):
    def __init__(self, config: ModelConfig, width: int, mlp: int):
        super().__init__()
        self.embed = nn.Embedding(config.vocab_size, width)
        self.pos = nn.Parameter(torch.zeros(config.max_len, width))
        self.layers = nn.ModuleList(BranchLayer(width, config.attn_dim, mlp) for _ in range(config.n_layers))
        self.norm = RMSNorm(width)
        self.head = nn.Linear(width, config.vocab_size, bias=False)


class ElasticMoT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.und = Branch(config, config.und_width, config.und_mlp)
        self.gen = Branch(config, config.gen_width, config.gen_mlp)

    def forward(self, tokens: torch.Tensor, gen_tags: torch.Tensor, mode: TaskMode,
                pad: torch.Tensor | None = None, rows: torch.Tensor | None = None) -> torch.Tensor:
        """tokens/gen_tags/pad: (B, L). Returns logits (B, L, V).

        Each branch only processes the positions routed to it. Rows whose
        branch is not evaluated in ``mode`` (UND rows under GEN_ONLY) come back
        as NaN. With ``rows`` (flat indices into B*L) only those rows are
        projected to the vocabulary and the result is (len(rows), V).
        """
        cfg = self.config
        B, L = tokens.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        gen_tags = gen_tags.bool()
        if mode is TaskMode.UND_ONLY and bool(gen_tags.any()):
            raise ValueError("GEN-tagged positions are not allowed in UND_ONLY mode")
        pad = torch.zeros(B, L, dtype=torch.bool) if pad is None else pad.bool()

        eye = torch.eye(L, dtype=torch.bool)
        keys_ok = ~pad[:, None, :]
        joint_mask = keys_ok | eye
        same = gen_tags[:, :, None] == gen_tags[:, None, :]
        split_mask = (keys_ok & same) | eye

        flat_tok = tokens.reshape(-1)
        flat_gen = gen_tags.reshape(-1)
        pos = torch.arange(L).repeat(B)
        iu = torch.nonzero(~flat_gen).squeeze(1)
        ig = torch.nonzero(flat_gen).squeeze(1)
        BL = B * L

        def embed(branch, idx):
            h = branch.embed(flat_tok[idx])
            if cfg.learned_positions:
                h = h + branch.pos[pos[idx]]
            return h

        h_u, h_g = embed(self.und, iu), embed(self.gen, ig)
        n_h = cfg.n_heads
        d_h = cfg.attn_dim // n_h

        for li in range(cfg.n_layers):
            joint = li < cfg.joint_layers
            und_live = mode is not TaskMode.GEN_ONLY or joint
            lu, lg = self.und.layers[li], self.gen.layers[li]
            qkv = []
            parts = []
            if und_live:
                parts.append((iu, lu.qkv(h_u)))
            parts.append((ig, lg.qkv(h_g)))
            for j in range(3):
                buf = torch.zeros(BL, cfg.attn_dim, dtype=h_u.dtype)
                for idx, vals in parts:
                    buf = buf.index_copy(0, idx, vals[j])
                qkv.append(buf.view(B, L, cfg.attn_dim))
            att = self._attend(*qkv, joint_mask if joint else split_mask, n_h, d_h).reshape(BL, -1)
            if und_live:
                h_u = h_u + lu.o(att[iu])
                h_u = h_u + lu.mlp(h_u)
            h_g = h_g + lg.o(att[ig])
            h_g = h_g + lg.mlp(h_g)

        if rows is None:
            rows = torch.arange(BL)
            shape = (B, L, cfg.vocab_size)
        else:
            rows = torch.as_tensor(rows)
            shape = (len(rows), cfg.vocab_size)
        # position of each flat index inside its branch's compact storage
        slot = torch.empty(BL, dtype=torch.long)
        slot[iu] = torch.arange(len(iu))
        slot[ig] = torch.arange(len(ig))
        row_gen = flat_gen[rows]
        out = torch.full((len(rows), cfg.vocab_size), float("nan"), dtype=h_u.dtype)
        sel_g = torch.nonzero(row_gen).squeeze(1)
        sel_u = torch.nonzero(~row_gen).squeeze(1)
        if len(sel_g):
            out = out.index_copy(0, sel_g, self.gen.head(self.gen.norm(h_g[slot[rows[sel_g]]])))
        if len(sel_u) and mode is not TaskMode.GEN_ONLY:
            out = out.index_copy(0, sel_u, self.und.head(self.und.norm(h_u[slot[rows[sel_u]]])))
        return out.view(shape)

    @staticmethod
    def _attend(q, k, v, mask, n_h, d_h):
        B, L, _ = q.shape
        q = q.view(B, L, n_h, d_h).transpose(1, 2)
        k = k.view(B, L, n_h, d_h).transpose(1, 2)
        v = v.view(B, L, n_h, d_h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None])
        return out.transpose(1, 2).reshape(B, L, n_h * d_h)


def build_model(config: ModelConfig, seed: int = 0, truncated: bool = True,
                dtype: torch.dtype = torch.float32) -> ElasticMoT:
    gen = torch.Generator().manual_seed(seed)
    model = ElasticMoT(config).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm.weight") or ".attn_norm." in name or ".mlp_norm." in name:
                p.fill_(1.0)
            elif name.endswith(".pos"):
                p.normal_(0.0, 0.02, generator=gen)
            else:
                p.normal_(0.0, 1.0 / math.sqrt(p.shape[-1]), generator=gen)
    if truncated:
        init_truncated(model)
    return model


def _lead(src: torch.Tensor, shape) -> torch.Tensor:
    return src[tuple(slice(0, s) for s in shape)]


def init_truncated(model: ElasticMoT) -> ElasticMoT:
    """Copy the leading sub-block of every UND tensor into its GEN counterpart."""
    und = dict(model.und.named_parameters())
    with torch.no_grad():
        for name, p in model.gen.named_parameters():
            src = und[name]
            if any(s > d for s, d in zip(p.shape, src.shape)) or p.dim() != src.dim():
                raise ValueError(f"cannot truncate {name}: {tuple(src.shape)} -> {tuple(p.shape)}")
            p.copy_(_lead(src, p.shape))
    return model


# ---------------------------------------------------------------- predictor


class ToyPredictor:
    """Adapter: SequenceState -> numpy logits, running the torch model without grad."""

    def __init__(self, model: ElasticMoT, mode: TaskMode | None = None):
        self.model = model
        self.mode = mode
        self.calls = 0

    def __call__(self, state: SequenceState) -> np.ndarray:
        self.calls += 1
        tags = state.branch_tags == GEN
        mode = self.mode
        if mode is None:
            mode = TaskMode.INTERLEAVED if tags.any() else TaskMode.UND_ONLY
        tok = torch.as_tensor(state.tokens)[None]
        g = torch.as_tensor(tags)[None]
        with torch.no_grad():
            out = self.model(tok, g, mode)[0]
        return out.double().numpy()


# ---------------------------------------------------------------- accounting


@dataclass
class ParamReport:
    loaded: dict[str, int]
    trainable: dict[str, int]
    breakdown: dict[str, dict[str, int]]


def _layer_params(width: int, attn_dim: int, mlp: int) -> dict[str, int]:
    return {
        "attention": 4 * width * attn_dim,
        "mlp": 3 * width * mlp,
        "norm": 2 * width,
    }


def _branch_params(cfg: ModelConfig, width: int, mlp: int, vocab: int, input_embedding: bool,
                   n_layers: int, with_head: bool) -> dict[str, int]:
    layer = _layer_params(width, cfg.attn_dim, mlp)
    emb = (vocab * width if input_embedding else 0)
    if cfg.learned_positions:
        emb += cfg.max_len * width
    return {
        "embeddings": emb,
        "attention": n_layers * layer["attention"],
        "mlp": n_layers * layer["mlp"],
        "norm": n_layers * layer["norm"] + (width if with_head else 0),
        "head": vocab * width if with_head else 0,
    }


def param_report(config: ModelConfig) -> ParamReport:
    """Exact parameter counts per task mode."""
    if config.gen_width <= 0:
        raise ValueError("GEN_ONLY is undefined without a generation branch")
    gen_vocab = config.gen_vocab_size or config.vocab_size
    und_full = _branch_params(config, config.und_width, config.und_mlp, config.vocab_size, True,
                              config.n_layers, True)
    und_joint = _branch_params(config, config.und_width, config.und_mlp, config.vocab_size, True,
                               config.joint_layers, False)
    gen_full = _branch_params(config, config.gen_width, config.gen_mlp, gen_vocab,
                              config.gen_input_embedding, config.n_layers, True)
    u, uj, g = sum(und_full.values()), sum(und_joint.values()), sum(gen_full.values())
    loaded = {
        TaskMode.UND_ONLY.value: u,
        TaskMode.GEN_ONLY.value: uj + g,
        TaskMode.INTERLEAVED.value: u + g,
    }
    trainable = {
        TaskMode.UND_ONLY.value: u,
        TaskMode.GEN_ONLY.value: g,
        TaskMode.INTERLEAVED.value: u + g,
    }
    return ParamReport(loaded, trainable, {"und": und_full, "und_joint_prefix": und_joint, "gen": gen_full})


def count_module_params(model: ElasticMoT, mode: TaskMode) -> int:
    """Parameters a forward pass in ``mode`` actually reads (toy model, learned positions)."""
    cfg = model.config
    total = 0
    for name, p in model.named_parameters():
        branch, rest = name.split(".", 1)
        if branch == "gen" and mode is TaskMode.UND_ONLY:
            continue
        if branch == "und" and mode is TaskMode.GEN_ONLY:
            if rest.startswith("layers."):
                if int(rest.split(".")[1]) >= cfg.joint_layers:
                    continue
            elif not (rest.startswith("embed") or rest.startswith("pos")):
                continue
        total += p.numel()
    return total


def flop_estimate(config: ModelConfig, seq_len_und: int, seq_len_gen: int, mode: TaskMode,
                  *, backward: bool = False, frozen_und: bool = False) -> float:
    """Dense-transformer FLOPs (2 per multiply-add) summed over the layers the mode loads.

    With ``backward``, trainable work costs 3x the forward pass and frozen
    UND work 2x (activation gradients only).
    """
    T, G = seq_len_und, seq_len_gen
    if mode is TaskMode.UND_ONLY and G:
        raise ValueError("UND_ONLY has no generation tokens")
    gen_vocab = config.gen_vocab_size or config.vocab_size
    und_layer = sum(_layer_params(config.und_width, config.attn_dim, config.und_mlp).values())
    gen_layer = sum(_layer_params(config.gen_width, config.attn_dim, config.gen_mlp).values())
    und_layers = config.joint_layers if mode is TaskMode.GEN_ONLY else config.n_layers

    und_lin = 2.0 * und_layer * T * und_layers
    gen_lin = 2.0 * gen_layer * G * config.n_layers if mode is not TaskMode.UND_ONLY else 0.0
    attn_pair = 4.0 * config.attn_dim
    joint = attn_pair * (T + G) ** 2 * config.joint_layers
    if mode is TaskMode.GEN_ONLY:
        split = attn_pair * G ** 2 * config.decoupled_layers
    else:
        split = attn_pair * (T ** 2 + G ** 2) * config.decoupled_layers
    heads = 2.0 * gen_vocab * config.gen_width * G
    if mode is not TaskMode.GEN_ONLY:
        heads += 2.0 * config.vocab_size * config.und_width * T

    if not backward:
        return und_lin + gen_lin + joint + split + heads
    und_mult = 2.0 if frozen_und else 3.0
    return und_mult * und_lin + 3.0 * (gen_lin + joint + split + heads)


def elastic_speedup(config: ModelConfig, seq_len_und: int, seq_len_gen: int) -> float:
    """Training-step FLOP ratio: full-copy, fully joint, fully trained MoT over this
    config trained text-to-image with the UND branch frozen."""
    base = flop_estimate(standard_mot(config), seq_len_und, seq_len_gen, TaskMode.INTERLEAVED,
                         backward=True, frozen_und=False)
    ours = flop_estimate(config, seq_len_und, seq_len_gen, TaskMode.GEN_ONLY,
                         backward=True, frozen_und=True)
    return base / ours


# ---------------------------------------------------------------- checkpoints

MAGIC = b"EMOTCKPT"
VERSION = 1


def save_checkpoint(model: ElasticMoT, path) -> None:
    """Header (magic, u32 version, u32 json length, config json) then f32 LE tensors."""
    cfg = model.config.to_json().encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(cfg)))
        f.write(cfg)
        for _, p in model.state_dict().items():
            f.write(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> ElasticMoT:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError("not a checkpoint file")
        version, n = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_json(f.read(n).decode())
        model = ElasticMoT(config)
        state = {}
        for name, p in model.state_dict().items():
            buf = f.read(p.numel() * 4)
            if len(buf) != p.numel() * 4:
                raise ValueError(f"checkpoint truncated at {name}")
            state[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(p.shape).copy())
        if f.read(1):
            raise ValueError("trailing bytes in checkpoint")
    model.load_state_dict(state)
    return model

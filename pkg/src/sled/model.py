"""Autoregressive backbone, implicit generative head and stop head.

The backbone is a stack of pre-norm decoder layers (RMSNorm, rotary
attention, SwiGLU feed-forward) over a single stream that mixes text
tokens, EOT and continuous latent frames. The head maps a backbone
feature ``z`` and a standard-normal noise vector to one latent frame in a
single forward pass; noise enters only through adaptive-norm scale/shift.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ModelConfig",
    "InputItem",
    "SequenceState",
    "SledModel",
    "init_params",
    "embed_item",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    embed_dim: int = 64
    ffn_dim: int = 176
    latent_dim: int = 16
    vocab_size: int = 17
    head_blocks: int = 2
    head_dim: int = 64
    noise_dim: int = 16
    dropout: float = 0.0
    max_positions: int = 512
    rope_base: float = 10000.0

    def __post_init__(self):
        errors = self.validation_errors()
        if errors:
            raise ValueError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errors = []
        for name in ("layers", "heads", "embed_dim", "ffn_dim", "latent_dim", "vocab_size",
                     "head_blocks", "head_dim", "noise_dim", "max_positions"):
            if int(getattr(self, name)) < 1:
                errors.append(f"model.{name} must be positive")
        if self.heads >= 1 and self.embed_dim % self.heads:
            errors.append("model.embed_dim must be divisible by model.heads")
        elif self.heads >= 1 and (self.embed_dim // self.heads) % 2:
            errors.append("model head width (embed_dim / heads) must be even for rotary embeddings")
        if not (0.0 <= self.dropout < 1.0):
            errors.append("model.dropout must lie in [0, 1)")
        if self.vocab_size < 2:
            errors.append("model.vocab_size must hold at least one text token and EOT")
        return errors

    @property
    def eot_id(self) -> int:
        return self.vocab_size - 1

    @classmethod
    def large_scale(cls, **overrides) -> "ModelConfig":
        base = dict(layers=12, heads=16, embed_dim=1024, ffn_dim=2752, latent_dim=128,
                    head_blocks=6, head_dim=1024, noise_dim=128, dropout=0.1,
                    vocab_size=16385, max_positions=4096)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class InputItem:
    """One stream position: ``kind`` is ``"text"``, ``"frame"`` or ``"eot"``."""

    kind: str
    token: int | None = None
    frame: tuple | np.ndarray | None = None

    @classmethod
    def text(cls, token: int) -> "InputItem":
        return cls("text", token=int(token))

    @classmethod
    def eot(cls) -> "InputItem":
        return cls("eot")

    @classmethod
    def latent(cls, frame) -> "InputItem":
        return cls("frame", frame=np.asarray(frame, dtype=np.float64))


class SequenceState:
    """Per-layer key/value cache for incremental decoding."""

    def __init__(self, layers: int):
        self.keys: list[torch.Tensor | None] = [None] * layers
        self.values: list[torch.Tensor | None] = [None] * layers
        self.position = 0

    def cache_length(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[2]


def _rope_tables(config: ModelConfig, dtype=torch.float32):
    half = config.embed_dim // config.heads // 2
    inv = 1.0 / (config.rope_base ** (torch.arange(half, dtype=torch.float64) / half))
    angles = torch.outer(torch.arange(config.max_positions, dtype=torch.float64), inv)
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def _apply_rope(x, cos, sin):
    # x: (B, H, T, dh); rotate the two halves of the head dimension
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.heads = config.heads
        self.head_width = d // config.heads
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(self, x, cos, sin, cache=None):
        B, T, D = x.shape
        shape = (B, T, self.heads, self.head_width)
        q = self.wq(x).view(shape).transpose(1, 2)
        k = self.wk(x).view(shape).transpose(1, 2)
        v = self.wv(x).view(shape).transpose(1, 2)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        past = 0
        if cache is not None:
            past_k, past_v = cache
            if past_k is not None:
                past = past_k.shape[2]
                k = torch.cat([past_k, k], dim=2)
                v = torch.cat([past_v, v], dim=2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_width)
        total = past + T
        mask = torch.ones(T, total, dtype=torch.bool).tril(diagonal=past)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(B, T, D)
        return self.wo(out), (k, v)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.w1 = nn.Linear(dim, hidden, bias=False)
        self.w3 = nn.Linear(dim, hidden, bias=False)
        self.w2 = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = nn.RMSNorm(config.embed_dim, eps=1e-6)
        self.attn = Attention(config)
        self.ffn_norm = nn.RMSNorm(config.embed_dim, eps=1e-6)
        self.ffn = FeedForward(config.embed_dim, config.ffn_dim)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x, cos, sin, cache=None):
        a, new_cache = self.attn(self.attn_norm(x), cos, sin, cache)
        x = x + self.drop(a)
        x = x + self.drop(self.ffn(self.ffn_norm(x)))
        return x, new_cache


class HeadBlock(nn.Module):
    """``u + MLP(norm(u) * (1 + scale(eps)) + shift(eps))``."""

    def __init__(self, width, noise_dim):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.noise_proj = nn.Linear(noise_dim, 2 * width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, u, eps):
        scale, shift = self.noise_proj(eps).chunk(2, dim=-1)
        x = self.norm(u) * (1.0 + scale) + shift
        return u + self.fc2(F.silu(self.fc1(x)))


class GenerativeHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.in_proj = nn.Linear(config.embed_dim, config.head_dim)
        self.blocks = nn.ModuleList(HeadBlock(config.head_dim, config.noise_dim) for _ in range(config.head_blocks))
        self.out_proj = nn.Linear(config.head_dim, config.latent_dim)
        self.calls = 0

    def forward(self, z, eps):
        self.calls += 1
        u = self.in_proj(z)
        for block in self.blocks:
            u = block(u, eps)
        return self.out_proj(u)


class SledModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.embed_dim)
        self.latent_in = nn.Linear(config.latent_dim, config.embed_dim)
        self.latent_norm = nn.LayerNorm(config.embed_dim, eps=1e-5, bias=False)
        self.layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.layers))
        self.final_norm = nn.RMSNorm(config.embed_dim, eps=1e-6)
        self.head = GenerativeHead(config)
        self.stop = nn.Linear(config.embed_dim, 1)
        cos, sin = _rope_tables(config)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def _apply(self, fn, *args, **kwargs):
        # Rebuild rotary tables at the new precision rather than casting.
        out = super()._apply(fn, *args, **kwargs)
        cos, sin = _rope_tables(self.config, self.tok_emb.weight.dtype)
        self.rope_cos, self.rope_sin = cos.to(self.tok_emb.weight.device), sin.to(self.tok_emb.weight.device)
        return out

    @property
    def dtype(self):
        return self.tok_emb.weight.dtype

    def embed(self, tokens, frames, is_frame):
        """Embed a (B, T) stream; frame positions use the latent path."""
        tok = self.tok_emb(tokens.clamp(min=0))
        lat = self.latent_norm(self.latent_in(frames.to(self.dtype)))
        return torch.where(is_frame[..., None], lat, tok)

    def backbone(self, x, state: SequenceState | None = None):
        """Run the decoder over embedded inputs ``x`` (B, T, D) appended after ``state``."""
        B, T, _ = x.shape
        start = 0 if state is None else state.position
        if start + T > self.config.max_positions:
            raise ValueError(f"position {start + T} exceeds max_positions={self.config.max_positions}")
        cos = self.rope_cos[start : start + T]
        sin = self.rope_sin[start : start + T]
        for i, layer in enumerate(self.layers):
            cache = None if state is None else (state.keys[i], state.values[i])
            x, (k, v) = layer(x, cos, sin, cache)
            if state is not None:
                state.keys[i], state.values[i] = k, v
        if state is not None:
            state.position = start + T
        return self.final_norm(x)

    def head_sample(self, z, eps):
        if not torch.all(torch.isfinite(eps)):
            raise ValueError("noise vector must be finite")
        return self.head(z, eps.to(self.dtype))

    def stop_logit(self, z):
        return self.stop(z).squeeze(-1)

    def stop_prob(self, z):
        return torch.sigmoid(self.stop_logit(z))

    def new_state(self) -> SequenceState:
        return SequenceState(self.config.layers)

    def items_to_tensors(self, items: Iterable[InputItem]):
        items = list(items)
        n = self.config.latent_dim
        tokens = torch.zeros(1, len(items), dtype=torch.long)
        frames = torch.zeros(1, len(items), n, dtype=self.dtype)
        is_frame = torch.zeros(1, len(items), dtype=torch.bool)
        for i, item in enumerate(items):
            if item.kind == "frame":
                f = torch.as_tensor(np.asarray(item.frame), dtype=self.dtype).reshape(-1)
                if f.shape[0] != n:
                    raise ValueError(f"frame dim {f.shape[0]} != latent_dim {n}")
                frames[0, i] = f
                is_frame[0, i] = True
            elif item.kind == "text":
                if not (0 <= item.token < self.config.eot_id):
                    raise ValueError(f"token id {item.token} out of range")
                tokens[0, i] = item.token
            elif item.kind == "eot":
                tokens[0, i] = self.config.eot_id
            else:
                raise ValueError(f"unknown item kind {item.kind!r}")
        return tokens, frames, is_frame

    def forward_items(self, items: Iterable[InputItem], state: SequenceState | None = None):
        """Backbone features ``(T, D)`` for one sequence of input items."""
        tokens, frames, is_frame = self.items_to_tensors(items)
        return self.backbone(self.embed(tokens, frames, is_frame), state)[0]


def embed_item(model: SledModel, item: InputItem) -> torch.Tensor:
    tokens, frames, is_frame = model.items_to_tensors([item])
    return model.embed(tokens, frames, is_frame)[0, 0]


def init_params(config: ModelConfig, seed: int) -> SledModel:
    """Build a model with deterministic initial weights.

    Linear and embedding weights are N(0, 0.02); attention and feed-forward
    output projections are further scaled by 1/sqrt(2 * layers). Noise
    projections in the head start at zero and the stop bias at -2.
    """
    gen = torch.Generator().manual_seed(int(seed))
    model = SledModel(config)
    out_std = 0.02 / math.sqrt(2 * config.layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif ".noise_proj." in name:
                p.zero_()
            elif name.endswith(".bias"):
                p.zero_()
            elif name.endswith("attn.wo.weight") or name.endswith("ffn.w2.weight"):
                p.normal_(0.0, out_std, generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)
        model.stop.bias.fill_(-2.0)
    model.eval()
    return model


CHECKPOINT_MAGIC = b"SLCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def save_checkpoint(path, model: SledModel, step: int = 0, optimizer_state: list[torch.Tensor] | None = None,
                    extra: dict | None = None) -> None:
    """Write an SLCK checkpoint.

    Layout: magic, u16 version, u32 header length, canonical-JSON header
    (model config, step, tensor shapes), then float32 little-endian tensors
    in parameter declaration order, then any optimizer tensors.
    """
    params = list(model.named_parameters())
    header = {
        "model": model.config.to_dict(),
        "step": int(step),
        "tensors": [[name, list(p.shape)] for name, p in params],
        "optimizer": [list(t.shape) for t in optimizer_state] if optimizer_state else [],
        "extra": extra or {},
    }
    blob = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(p.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes())
        for t in optimizer_state or []:
            fh.write(t.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes())


@dataclass
class Checkpoint:
    model: SledModel
    step: int
    optimizer_state: list[torch.Tensor]
    extra: dict


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: config mismatch with the requested model")
    model = SledModel(config)
    params = dict(model.named_parameters())
    offset = 10 + hlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset = end
        return torch.from_numpy(arr.astype(np.float32))

    names = [name for name, _ in header["tensors"]]
    if names != list(params):
        raise CheckpointError(f"{path}: tensor list does not match the model layout")
    with torch.no_grad():
        for name, shape in header["tensors"]:
            if list(params[name].shape) != shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            params[name].copy_(take(shape))
    opt_state = [take(shape) for shape in header["optimizer"]]
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    model.eval()
    return Checkpoint(model, int(header["step"]), opt_state, header.get("extra", {}))

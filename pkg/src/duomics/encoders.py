"""Slide and RNA encoders.

The slide encoder is a small transformer over a fixed-size bag of patch
features: input projection, a learnable summary token, one attention
block, a convolutional grid token mixer, a second attention block, final
layer norm. The mixer arranges patch tokens row-major on the smallest
square grid that fits them, pads the tail with copies of the last token,
adds depthwise 3x3 + 5x5 + 7x7 zero-padded convolutions to the identity
path, then drops the padding. The summary token bypasses the mixer.

The RNA encoder splits the gene panel into contiguous groups, embeds each
group with its own linear map, prepends a learnable summary token, runs a
two-block pre-norm transformer and projects the summary position to the
shared dimension.

All attention is exact softmax attention; initialization is a pure
function of (config, seed, dtype).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .data_model import ValidationError

TOKEN_INIT_STD = 0.02


@dataclass
class ModelConfig:
    d_p: int = 64
    d_model: int = 64
    d_t: int = 64
    n_heads: int = 4
    depth: int = 2
    mlp_ratio: int = 2
    n_fixed: int = 64
    g_t: int = 16
    k_genes: int = 256
    d_z: int = 32
    n_clusters: int = 8

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_t % self.n_heads:
            raise ValidationError(f"d_t {self.d_t} not divisible by n_heads {self.n_heads}")
        if self.g_t > self.k_genes:
            raise ValidationError("more gene groups than genes")
        for name in ("d_p", "d_model", "d_t", "n_heads", "depth", "mlp_ratio",
                     "n_fixed", "g_t", "k_genes", "d_z", "n_clusters"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.n_clusters < 2:
            raise ValidationError("n_clusters must be >= 2")


def init_linear_(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    layer.weight.data.uniform_(-bound, bound, generator=gen)
    if layer.bias is not None:
        layer.bias.data.uniform_(-bound, bound, generator=gen)


def init_token_(param: torch.Tensor, gen: torch.Generator) -> None:
    param.data.normal_(0.0, TOKEN_INIT_STD, generator=gen)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def init_weights(self, gen: torch.Generator) -> None:
        init_linear_(self.qkv, gen)
        init_linear_(self.out, gen)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, t, head_dim)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y), attn


class TransformerBlock(nn.Module):
    """Pre-norm attention + pre-norm MLP with GELU."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def init_weights(self, gen: torch.Generator) -> None:
        self.attn.init_weights(gen)
        init_linear_(self.fc1, gen)
        init_linear_(self.fc2, gen)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.fc2(self.act(self.fc1(self.norm2(x))))
        return x, attn


class GridTokenMixer(nn.Module):
    """Depthwise multi-scale neighborhood mixing of tokens on a square grid."""

    KERNELS = (3, 5, 7)

    def __init__(self, dim: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(dim, dim, k, padding=k // 2, groups=dim, bias=False)
            for k in self.KERNELS
        )

    def init_weights(self, gen: torch.Generator) -> None:
        for conv in self.convs:
            init_token_(conv.weight, gen)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        side = math.isqrt(n)
        if side * side != n:
            side += 1
        pad = side * side - n
        if pad:
            tail = tokens[:, -1:, :].expand(b, pad, d)
            tokens = torch.cat([tokens, tail], dim=1)
        grid = tokens.transpose(1, 2).reshape(b, d, side, side)
        mixed = grid + sum(conv(grid) for conv in self.convs)
        flat = mixed.reshape(b, d, side * side).transpose(1, 2)
        return flat[:, :n]


class SlideEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.d_p, cfg.d_model)
        self.summary_token = nn.Parameter(torch.zeros(cfg.d_model))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.mixer = GridTokenMixer(cfg.d_model)
        self.norm = nn.LayerNorm(cfg.d_model)

    def init_weights(self, gen: torch.Generator) -> None:
        init_linear_(self.proj, gen)
        init_token_(self.summary_token, gen)
        for block in self.blocks:
            block.init_weights(gen)
        self.mixer.init_weights(gen)

    def forward(self, bags: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """bags (b, n, d_p) -> (patch tokens (b, n, d), summary (b, d),
        summary-to-patch attention of the last block (b, heads, n))."""
        if bags.ndim != 3 or bags.shape[-1] != self.cfg.d_p:
            raise ValidationError(
                f"expected patch bags (b, n, {self.cfg.d_p}), got {tuple(bags.shape)}"
            )
        b = bags.shape[0]
        x = self.proj(bags)
        summary = self.summary_token.expand(b, 1, -1)
        x = torch.cat([summary, x], dim=1)
        attn = None
        for i, block in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                mixed = self.mixer(x[:, 1:])
                x = torch.cat([x[:, :1], mixed], dim=1)
            x, attn = block(x)
        x = self.norm(x)
        summary_attn = attn[:, :, 0, 1:]
        summary_attn = summary_attn / summary_attn.sum(dim=-1, keepdim=True)
        return x[:, 1:], x[:, 0], summary_attn


def group_slices(k_genes: int, g_t: int) -> list[slice]:
    """Contiguous gene groups covering [0, k_genes), sizes differing by at
    most one (earlier groups take the remainder)."""
    base, extra = divmod(k_genes, g_t)
    slices = []
    start = 0
    for g in range(g_t):
        size = base + (1 if g < extra else 0)
        slices.append(slice(start, start + size))
        start += size
    return slices


class RnaEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.slices = group_slices(cfg.k_genes, cfg.g_t)
        self.group_embeds = nn.ModuleList(
            nn.Linear(s.stop - s.start, cfg.d_t) for s in self.slices
        )
        self.summary_token = nn.Parameter(torch.zeros(cfg.d_t))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_t, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.out_proj = nn.Linear(cfg.d_t, cfg.d_model)

    def init_weights(self, gen: torch.Generator) -> None:
        for emb in self.group_embeds:
            init_linear_(emb, gen)
        init_token_(self.summary_token, gen)
        for block in self.blocks:
            block.init_weights(gen)
        init_linear_(self.out_proj, gen)

    def embed_groups(self, expr: torch.Tensor) -> torch.Tensor:
        """Per-group linear embeddings before any attention, (b, g_t, d_t)."""
        if expr.ndim != 2 or expr.shape[-1] != self.cfg.k_genes:
            raise ValidationError(
                f"expected expression (b, {self.cfg.k_genes}), got {tuple(expr.shape)}"
            )
        return torch.stack(
            [emb(expr[:, s]) for emb, s in zip(self.group_embeds, self.slices)], dim=1
        )

    def forward(self, expr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """expr (b, k) -> (shared-space vector (b, d_model), group tokens (b, g_t, d_t))."""
        tokens = self.embed_groups(expr)
        b = tokens.shape[0]
        x = torch.cat([self.summary_token.expand(b, 1, -1), tokens], dim=1)
        for block in self.blocks:
            x, _ = block(x)
        return self.out_proj(x[:, 0]), x[:, 1:]


def build_encoders(
    cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32
) -> tuple[SlideEncoder, RnaEncoder]:
    """Deterministic construction: same (cfg, seed, dtype) gives bitwise-equal
    parameters."""
    gen = torch.Generator().manual_seed(seed)
    slide = SlideEncoder(cfg).to(dtype)
    rna = RnaEncoder(cfg).to(dtype)
    slide.init_weights(gen)
    rna.init_weights(gen)
    return slide, rna

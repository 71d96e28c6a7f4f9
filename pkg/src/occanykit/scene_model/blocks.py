"""Pre-norm transformer blocks with rotary positions.

All residual branches end in an output projection (attention ``proj`` /
MLP ``fc2``); zeroing those projections makes every block an exact identity,
which the tests rely on.
"""

from __future__ import annotations

import torch
from torch import nn

from .rope import apply_rope_2d


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    n, d = x.shape
    return x.view(n, heads, d // heads).transpose(0, 1)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    h, n, hd = x.shape
    return x.transpose(0, 1).reshape(n, h * hd)


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scale = q.shape[-1] ** -0.5
    attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    return attn @ v


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, rope_base: float):
        super().__init__()
        self.heads = heads
        self.rope_base = rope_base
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = apply_rope_2d(_split_heads(q, self.heads), positions, self.rope_base)
        k = apply_rope_2d(_split_heads(k, self.heads), positions, self.rope_base)
        v = _split_heads(v, self.heads)
        return self.proj(_merge_heads(_attend(q, k, v)))


class CrossAttention(nn.Module):
    def __init__(self, d: int, heads: int, rope_base: float):
        super().__init__()
        self.heads = heads
        self.rope_base = rope_base
        self.to_q = nn.Linear(d, d)
        self.to_kv = nn.Linear(d, 2 * d)
        self.proj = nn.Linear(d, d)
        self.last_key_count: int | None = None

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        mem_tokens: torch.Tensor,
        mem_positions: torch.Tensor,
    ) -> torch.Tensor:
        self.last_key_count = int(mem_tokens.shape[0])
        q = apply_rope_2d(_split_heads(self.to_q(x), self.heads), positions, self.rope_base)
        k, v = self.to_kv(mem_tokens).chunk(2, dim=-1)
        k = apply_rope_2d(_split_heads(k, self.heads), mem_positions, self.rope_base)
        v = _split_heads(v, self.heads)
        return self.proj(_merge_heads(_attend(q, k, v)))


class Mlp(nn.Module):
    def __init__(self, d: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, rope_base: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads, rope_base)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), positions)
        x = x + self.mlp(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    """Self-attention over the frame, cross-attention to scene memory, MLP."""

    def __init__(self, d: int, heads: int, rope_base: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads, rope_base)
        self.norm_cross = nn.LayerNorm(d)
        self.cross = CrossAttention(d, heads, rope_base)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d)

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        mem_tokens: torch.Tensor | None,
        mem_positions: torch.Tensor | None,
    ) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), positions)
        if mem_tokens is not None and mem_tokens.shape[0] > 0:
            x = x + self.cross(self.norm_cross(x), positions, mem_tokens, mem_positions)
        x = x + self.mlp(self.norm2(x))
        return x


def zero_output_projections(module: nn.Module) -> None:
    """Zero every attention/MLP output projection so blocks become identities."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (SelfAttention, CrossAttention)):
                m.proj.weight.zero_()
                m.proj.bias.zero_()
            elif isinstance(m, Mlp):
                m.fc2.weight.zero_()
                m.fc2.bias.zero_()

"""Transformer decoder pieces: sine position encoding, decoder layer, MLP."""

from __future__ import annotations

import math

import torch
from torch import nn


def sine_position_encoding(height: int, width: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding, (height * width, dim); half the channels
    encode y, half x."""
    if dim % 4:
        raise ValueError("position encoding dim must be divisible by 4")
    quarter = dim // 4
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height * 2 * math.pi
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width * 2 * math.pi
    py = ys[:, None] * freq[None]
    px = xs[:, None] * freq[None]
    py = torch.cat([py.sin(), py.cos()], dim=1)[:, None, :].expand(height, width, 2 * quarter)
    px = torch.cat([px.sin(), px.cos()], dim=1)[None, :, :].expand(height, width, 2 * quarter)
    return torch.cat([py, px], dim=-1).reshape(height * width, dim).to(dtype)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        mods = []
        for i in range(layers):
            mods.append(nn.Linear(dims[i], dims[i + 1]))
            if i < layers - 1:
                mods.append(nn.ReLU())
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class DecoderLayer(nn.Module):
    """Post-norm decoder layer: optional query self-attention, cross-attention
    to position-encoded memory, feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, self_attention: bool = True):
        super().__init__()
        self.self_attention = self_attention
        if self_attention:
            self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
            self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, memory, pos):
        if self.self_attention:
            tgt = self.norm1(tgt + self.self_attn(tgt, tgt, tgt, need_weights=False)[0])
        tgt = self.norm2(tgt + self.cross_attn(tgt, memory + pos, memory, need_weights=False)[0])
        return self.norm3(tgt + self.ffn(tgt))

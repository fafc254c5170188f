"""Small attention building blocks shared by the encoder stand-in, T-Fusion and the decoder."""

import math

import torch
import torch.nn as nn


class MultiHeadAttention(nn.Module):
    """Multi-head dot-product attention that also returns per-head attention weights.

    ``forward(query, context)`` returns ``(out, attn)`` where ``attn`` has shape
    ``[B, heads, Nq, Nk]`` and sums to one over the last axis.
    """

    def __init__(self, d_model, n_heads, d_context=None):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"width {d_model} not divisible by {n_heads} heads")
        d_context = d_model if d_context is None else d_context
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.to_q = nn.Linear(d_model, d_model, bias=False)
        self.to_k = nn.Linear(d_context, d_model, bias=False)
        self.to_v = nn.Linear(d_context, d_model, bias=False)
        self.proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context=None, causal=False):
        context = query if context is None else context
        q = self._split(self.to_q(query))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if causal:
            n_q, n_k = logits.shape[-2:]
            blocked = torch.ones(n_q, n_k, dtype=torch.bool, device=logits.device).triu(1)
            logits = logits.masked_fill(blocked, float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.proj(out), attn


class FeedForward(nn.Sequential):
    def __init__(self, d_model, hidden, activation=nn.GELU):
        super().__init__(nn.Linear(d_model, hidden), activation(), nn.Linear(hidden, d_model))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model, n_heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, mlp_ratio * d_model)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))[0]
        return x + self.ffn(self.norm2(x))


def sinusoidal_grid_code(height, width, dim, dtype=torch.float32):
    """2-D sinusoidal positional code of shape ``[height * width, dim]`` in raster order.

    Half of the channels encode the row, half the column; ``dim`` must be a multiple of 4.
    """
    if dim % 4 != 0:
        raise ValueError(f"positional code width must be a multiple of 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys = torch.arange(height, dtype=torch.float64)[:, None] * freqs * (math.pi / max(height, 1))
    xs = torch.arange(width, dtype=torch.float64)[:, None] * freqs * (math.pi / max(width, 1))
    row = torch.cat([ys.sin(), ys.cos()], dim=-1)  # [H, dim/2]
    col = torch.cat([xs.sin(), xs.cos()], dim=-1)  # [W, dim/2]
    code = torch.cat(
        [row[:, None, :].expand(height, width, -1), col[None, :, :].expand(height, width, -1)], dim=-1
    )
    return code.reshape(height * width, dim).to(dtype)


def trunc_normal_(tensor, std=0.02):
    return nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


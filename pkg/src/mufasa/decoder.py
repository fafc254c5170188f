"""Decoders reconstructing target features from slots.

Both return ``(reconstruction [B, N, d_emb], mask [B, N, K])`` with row-stochastic masks.
"""

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DimensionError
from .layers import FeedForward, MultiHeadAttention, trunc_normal_

DECODER_KINDS = ("transformer", "mlp")


class _DecoderLayer(nn.Module):
    def __init__(self, width, n_heads, mlp_ratio=4):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, n_heads)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, n_heads)
        self.norm_ffn = nn.LayerNorm(width)
        self.ffn = FeedForward(width, mlp_ratio * width)

    def forward(self, x, slots):
        x = x + self.self_attn(self.norm_self(x), causal=True)[0]
        out, attn = self.cross_attn(self.norm_cross(x), slots)
        x = x + out
        return x + self.ffn(self.norm_ffn(x)), attn


class TransformerDecoder(nn.Module):
    """Autoregressive patch decoder conditioned on slots through cross-attention.

    Teacher forcing: the input sequence is ``[BOS, t_1, ..., t_{N-1}]`` where ``t`` is the
    target in decoding order ``order``; outputs are returned in raster order. The mask is
    the head average of the last layer's patch-to-slot cross-attention.
    """

    def __init__(self, d_slot, d_emb, n_patches, width=192, n_layers=4, n_heads=6, mlp_ratio=4, order=None):
        super().__init__()
        if width % n_heads != 0:
            raise ConfigurationError(f"decoder width {width} not divisible by {n_heads} heads")
        self.d_emb = d_emb
        self.n_patches = n_patches
        self.in_proj = nn.Linear(d_emb, width)
        self.slot_proj = nn.Linear(d_slot, width)
        self.bos = nn.Parameter(torch.zeros(1, 1, width))
        self.pos = nn.Parameter(trunc_normal_(torch.empty(1, n_patches, width)))
        self.layers = nn.ModuleList(_DecoderLayer(width, n_heads, mlp_ratio) for _ in range(n_layers))
        self.norm_out = nn.LayerNorm(width)
        self.out = nn.Linear(width, d_emb)
        self.set_order(order)

    def set_order(self, order):
        order = np.arange(self.n_patches) if order is None else np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.n_patches)):
            raise ConfigurationError("decoding order must be a permutation of the patches")
        self.register_buffer("order", torch.as_tensor(order), persistent=False)
        self.register_buffer("inverse", torch.as_tensor(np.argsort(order)), persistent=False)

    def forward(self, slots, target):
        B, N, d = target.shape
        if N != self.n_patches or d != self.d_emb:
            raise DimensionError(f"expected target [B, {self.n_patches}, {self.d_emb}], got {tuple(target.shape)}")
        seq = target[:, self.order]
        x = torch.cat([self.bos.expand(B, -1, -1).to(target.dtype), self.in_proj(seq[:, :-1])], dim=1)
        x = x + self.pos
        s = self.slot_proj(slots)
        attn = None
        for layer in self.layers:
            x, attn = layer(x, s)
        recon = self.out(self.norm_out(x))
        mask = attn.mean(dim=1)
        return recon[:, self.inverse], mask[:, self.inverse]


class BroadcastDecoder(nn.Module):
    """Spatial-broadcast MLP decoder with softmax-over-slots alpha masks."""

    def __init__(self, d_slot, d_emb, n_patches, hidden=2048, n_layers=4):
        super().__init__()
        if n_layers < 2:
            raise ConfigurationError("the MLP decoder needs at least two layers")
        self.d_emb = d_emb
        self.pos = nn.Parameter(trunc_normal_(torch.empty(1, 1, n_patches, d_slot)))
        dims = [d_slot] + [hidden] * (n_layers - 1) + [d_emb + 1]
        mods = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            mods.append(nn.Linear(a, b))
            if i < n_layers - 1:
                mods.append(nn.ReLU())
        self.mlp = nn.Sequential(*mods)

    def forward(self, slots, target=None):
        x = slots.unsqueeze(2) + self.pos  # [B, K, N, d_slot]
        out = self.mlp(x)
        feats, logits = out[..., : self.d_emb], out[..., self.d_emb]
        alpha = logits.softmax(dim=1)  # over slots
        recon = (alpha.unsqueeze(-1) * feats).sum(dim=1)
        return recon, alpha.transpose(1, 2)


def build_decoder(kind, d_slot, d_emb, n_patches, **kw):
    if kind == "transformer":
        return TransformerDecoder(d_slot, d_emb, n_patches, **kw)
    if kind == "mlp":
        return BroadcastDecoder(d_slot, d_emb, n_patches, **kw)
    raise ConfigurationError(f"unknown decoder kind {kind!r}")


def transformer_decode(slots, target, params):
    """Unbatched: ``[K, d_slot]`` slots, ``[N, d_emb]`` target."""
    recon, mask = params(slots.unsqueeze(0), target.unsqueeze(0))
    return recon[0], mask[0]


def broadcast_decode(slots, params):
    recon, mask = params(slots.unsqueeze(0))
    return recon[0], mask[0]

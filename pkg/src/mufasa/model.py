"""Multi-layer slot-attention autoencoder and the single-layer baseline it generalises."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .decoder import build_decoder
from .errors import DimensionError
from .fusion import SlotFusion, align_batch
from .slot_attention import SlotAttention


@dataclass
class ModelConfig:
    d_emb: int
    n_patches: int
    n_layers: int = 1
    n_slots: int = 6
    d_slot: int = 256
    sa_iters: int = 3
    sa_mlp_hidden: int = 1024
    slot_init: str = "gaussian"
    fusion: str = "m_fusion"
    fusion_hidden: int = 768
    mask_weights: str = "uniform"
    decoder: str = "transformer"
    dec_width: int = 192
    dec_layers: int = 4
    dec_heads: int = 6
    dec_hidden: int = 2048
    dec_order: list = None

    def decoder_kwargs(self):
        if self.decoder == "transformer":
            return dict(width=self.dec_width, n_layers=self.dec_layers, n_heads=self.dec_heads, order=self.dec_order)
        return dict(hidden=self.dec_hidden, n_layers=self.dec_layers)


@dataclass
class ModelOutput:
    slots: list  # per layer [B, K, d_slot], unaligned
    masks: list  # per layer [B, N, K], unaligned
    aligned_slots: list
    aligned_masks: list
    perms: object  # [M, B, K] int array
    fused_slots: torch.Tensor
    fused_mask: torch.Tensor
    recon: torch.Tensor
    dec_mask: torch.Tensor
    extras: dict = field(default_factory=dict)


def _make_slot_attention(cfg):
    return SlotAttention(
        cfg.d_emb, cfg.d_slot, cfg.n_slots, iters=cfg.sa_iters,
        mlp_hidden=cfg.sa_mlp_hidden, init_mode=cfg.slot_init,
    )


class MultiLayerSlotModel(nn.Module):
    """One independent slot-attention module per selected layer, alignment, fusion, decoder.

    The decoder reconstructs the deepest selected layer.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.slot_attention = nn.ModuleList(_make_slot_attention(cfg) for _ in range(cfg.n_layers))
        self.fusion = SlotFusion(
            cfg.n_layers, cfg.d_slot, strategy=cfg.fusion,
            hidden=cfg.fusion_hidden, mask_weights=cfg.mask_weights,
        )
        self.decoder = build_decoder(cfg.decoder, cfg.d_slot, cfg.d_emb, cfg.n_patches, **cfg.decoder_kwargs())

    def encode(self, features, generator=None, init_slots=None):
        """``features``: ``[B, M, N, d_emb]``. Returns unaligned per-layer slots and masks."""
        if features.dim() != 4 or features.shape[1] != self.cfg.n_layers:
            raise DimensionError(
                f"expected [B, {self.cfg.n_layers}, N, d_emb] features, got {tuple(features.shape)}"
            )
        slots, masks = [], []
        for m, sa in enumerate(self.slot_attention):
            init = None if init_slots is None else init_slots[m]
            s, a = sa(features[:, m], generator=generator, slots=init)
            slots.append(s)
            masks.append(a)
        return slots, masks

    def forward(self, features, generator=None, init_slots=None):
        slots, masks = self.encode(features, generator, init_slots)
        a_slots, a_masks, perms = align_batch(slots, masks)
        fused_slots = self.fusion.fuse_slots(a_slots)
        fused_mask = self.fusion.fuse_masks(a_masks)
        recon, dec_mask = self.decoder(fused_slots, features[:, -1])
        return ModelOutput(slots, masks, a_slots, a_masks, perms, fused_slots, fused_mask, recon, dec_mask)


class SingleLayerSlotModel(nn.Module):
    """Direct single-layer path: slot attention on one layer straight into the decoder."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.slot_attention = nn.ModuleList([_make_slot_attention(cfg)])
        self.decoder = build_decoder(cfg.decoder, cfg.d_slot, cfg.d_emb, cfg.n_patches, **cfg.decoder_kwargs())

    def forward(self, features, generator=None, init_slots=None):
        h = features[:, -1]
        init = None if init_slots is None else init_slots[0]
        slots, mask = self.slot_attention[0](h, generator=generator, slots=init)
        recon, dec_mask = self.decoder(slots, h)
        return ModelOutput([slots], [mask], [slots], [mask], None, slots, mask, recon, dec_mask)


def reconstruction_loss(target, recon):
    """Squared error normalised by the element count, averaged over any leading batch axes."""
    if target.shape != recon.shape:
        raise DimensionError(f"shape mismatch {tuple(target.shape)} vs {tuple(recon.shape)}")
    return ((target - recon) ** 2).mean()


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())

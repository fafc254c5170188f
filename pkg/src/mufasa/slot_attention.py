"""Iterative slot attention over one feature layer."""

import math

import torch
import torch.nn as nn

from .errors import ConfigurationError, DimensionError, NumericError

SLOT_INIT_MODES = ("gaussian", "learned")


class SlotAttention(nn.Module):
    """Slot-attention bottleneck producing ``K`` slots and an ``N x K`` attention mask.

    Keys and values are projected from layer-normalised features, queries from
    layer-normalised slots. Each round computes the softmax-over-slots attention,
    aggregates values with per-slot normalised weights, then applies a GRU cell
    followed by a residual MLP.
    """

    def __init__(
        self,
        d_emb,
        d_slot,
        n_slots,
        iters=3,
        mlp_hidden=1024,
        d_attn=None,
        init_mode="gaussian",
        eps=1e-8,
    ):
        super().__init__()
        if init_mode not in SLOT_INIT_MODES:
            raise ConfigurationError(f"unknown slot init mode {init_mode!r}")
        if n_slots < 1:
            raise ConfigurationError("need at least one slot")
        self.d_emb = d_emb
        self.d_slot = d_slot
        self.n_slots = n_slots
        self.iters = iters
        self.d_attn = d_slot if d_attn is None else d_attn
        self.init_mode = init_mode
        self.eps = eps

        self.norm_inputs = nn.LayerNorm(d_emb)
        self.norm_slots = nn.LayerNorm(d_slot)
        self.norm_mlp = nn.LayerNorm(d_slot)
        self.to_k = nn.Linear(d_emb, self.d_attn, bias=False)
        self.to_q = nn.Linear(d_slot, self.d_attn, bias=False)
        self.to_v = nn.Linear(d_emb, d_slot, bias=False)
        self.gru = nn.GRUCell(d_slot, d_slot)
        self.mlp = nn.Sequential(nn.Linear(d_slot, mlp_hidden), nn.ReLU(), nn.Linear(mlp_hidden, d_slot))

        if init_mode == "gaussian":
            self.slot_mu = nn.Parameter(torch.empty(d_slot))
            self.slot_log_sigma = nn.Parameter(torch.empty(d_slot))
            bound = math.sqrt(6.0 / (1 + d_slot))
            nn.init.uniform_(self.slot_mu, -bound, bound)
            nn.init.uniform_(self.slot_log_sigma, -bound, bound)
        else:
            self.slots_init = nn.Parameter(torch.empty(n_slots, d_slot))
            nn.init.xavier_uniform_(self.slots_init)

    def init_slots(self, batch_size, generator=None):
        """Initial slots ``[B, K, d_slot]``: Gaussian samples or the learned matrix verbatim."""
        if self.init_mode == "learned":
            return self.slots_init.unsqueeze(0).expand(batch_size, -1, -1)
        noise = torch.randn(
            batch_size, self.n_slots, self.d_slot,
            generator=generator, dtype=self.slot_mu.dtype, device=self.slot_mu.device,
        )
        return self.slot_mu + torch.exp(self.slot_log_sigma) * noise

    def attention(self, features, slots):
        """Softmax over slots of ``f_Key(features) . f_Query(slots)^T / sqrt(d)``.

        ``features``: ``[B, N, d_emb]``, ``slots``: ``[B, K, d_slot]``; returns ``[B, N, K]``.
        No normalisation layers are applied here.
        """
        if features.shape[-1] != self.d_emb or slots.shape[-1] != self.d_slot:
            raise DimensionError(
                f"expected feature width {self.d_emb} and slot width {self.d_slot}, "
                f"got {features.shape[-1]} and {slots.shape[-1]}"
            )
        k = self.to_k(features)
        q = self.to_q(slots)
        return self._softmax_scores(k, q)

    def _softmax_scores(self, k, q):
        return (k @ q.transpose(-1, -2) / math.sqrt(self.d_attn)).softmax(dim=-1)

    def forward(self, features, generator=None, slots=None, iters=None):
        """Run the refinement; returns ``(slots, mask)``.

        The mask is the attention of the last round, computed before that round's
        slot update. With zero rounds it is the attention of the initial slots.
        """
        if features.dim() != 3 or features.shape[-1] != self.d_emb:
            raise DimensionError(f"expected [B, N, {self.d_emb}] features, got {tuple(features.shape)}")
        iters = self.iters if iters is None else iters
        B = features.shape[0]
        if slots is None:
            slots = self.init_slots(B, generator)
        x = self.norm_inputs(features)
        k = self.to_k(x)
        v = self.to_v(x)

        attn = self._softmax_scores(k, self.to_q(self.norm_slots(slots))) if iters == 0 else None
        for it in range(iters):
            slots_prev = slots
            attn = self._softmax_scores(k, self.to_q(self.norm_slots(slots)))
            weights = attn / (attn.sum(dim=-2, keepdim=True) + self.eps)
            updates = weights.transpose(-1, -2) @ v
            slots = self.gru(updates.reshape(-1, self.d_slot), slots_prev.reshape(-1, self.d_slot))
            slots = slots.view(B, -1, self.d_slot)
            slots = slots + self.mlp(self.norm_mlp(slots))
            if not torch.isfinite(slots).all():
                raise NumericError(f"non-finite slots after slot-attention iteration {it + 1}")
        return slots, attn


def make_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def init_slots(params, seed, batch_size=1):
    """Initial slots of a :class:`SlotAttention` module under ``seed``."""
    return params.init_slots(batch_size, make_generator(seed))


def compute_attention(features, slots, params):
    """Eq.-2 style attention for unbatched ``[N, d_emb]`` features and ``[K, d_slot]`` slots."""
    return params.attention(features.unsqueeze(0), slots.unsqueeze(0))[0]


def run_slot_attention(features, params, seed, iters=None):
    """Unbatched convenience wrapper: ``[N, d_emb]`` -> (``[K, d_slot]`` slots, ``[N, K]`` mask)."""
    slots, attn = params(features.unsqueeze(0), make_generator(seed), iters=iters)
    return slots[0], attn[0]

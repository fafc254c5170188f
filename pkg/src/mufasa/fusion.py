"""Cross-layer slot alignment and slot/mask fusion.

Layer ``m + 1`` is aligned to the already aligned layer ``m`` by Hungarian matching on
the IoU between binarised attention masks. Aligned layers are then fused:

* ``m_fusion``      adjacent pairwise sums, concatenated over features, projected by an MLP
* ``avg_fusion``    plain mean of aligned slots and masks, no parameters
* ``concat_fusion`` concatenation of all layers (no pairwise sums) followed by the MLP
* ``t_fusion``      pairwise sums as in ``m_fusion``, projected and mixed by one transformer layer
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, DimensionError, NumericError
from .layers import TransformerBlock

STRATEGIES = ("m_fusion", "avg_fusion", "concat_fusion", "t_fusion")
MASK_WEIGHT_MODES = ("uniform", "learned")


def binarize_mask(mask):
    """One-hot of the per-row argmax (first maximum wins) of an ``[..., N, K]`` mask."""
    idx = mask.argmax(dim=-1)
    return torch.nn.functional.one_hot(idx, mask.shape[-1]).to(mask.dtype)


def pairwise_miou_cost(bin_a, bin_b):
    """``K x K`` IoU between columns of two binary ``N x K`` masks; empty-vs-empty is 0."""
    a = torch.as_tensor(bin_a, dtype=torch.float64)
    b = torch.as_tensor(bin_b, dtype=torch.float64)
    if a.shape != b.shape or a.dim() != 2:
        raise DimensionError(f"mask shapes differ or are not N x K: {tuple(a.shape)} vs {tuple(b.shape)}")
    inter = a.T @ b
    union = a.sum(0)[:, None] + b.sum(0)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp_min(1.0), torch.zeros_like(inter))


def _optimum(score):
    if score.size == 0:
        return 0.0
    r, c = linear_sum_assignment(score, maximize=True)
    return float(score[r, c].sum())


def hungarian_match(score):
    """Permutation ``perm`` maximising ``sum_i score[i, perm[i]]``.

    Among optimal permutations the lexicographically smallest is returned.
    """
    s = np.asarray(score, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square score matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise NumericError("score matrix has non-finite entries")
    K = s.shape[0]
    best = _optimum(s)
    tol = 1e-12 * (1.0 + abs(best))
    perm = np.empty(K, dtype=np.int64)
    free = list(range(K))
    fixed = 0.0
    for i in range(K):
        for j in free:
            rest = [c for c in free if c != j]
            value = fixed + s[i, j] + _optimum(s[np.ix_(range(i + 1, K), rest)])
            if value >= best - tol:
                perm[i] = j
                fixed += s[i, j]
                free = rest
                break
    return perm


def match_masks(reference, mask):
    """Permutation aligning the columns of ``mask`` to those of ``reference`` (both ``N x K``)."""
    cost = pairwise_miou_cost(binarize_mask(reference.detach()), binarize_mask(mask.detach()))
    return hungarian_match(cost.cpu().numpy())


@dataclass
class SlotFamily:
    """M per-layer slot sets (``K x d_slot`` each) and their ``N x K`` attention masks."""

    slot_sets: list
    masks: list
    aligned: bool = False

    def __post_init__(self):
        if len(self.slot_sets) < 1 or len(self.slot_sets) != len(self.masks):
            raise DimensionError("a family needs M >= 1 slot sets and as many masks")
        K = self.slot_sets[0].shape[-2]
        N = self.masks[0].shape[-2]
        for s, a in zip(self.slot_sets, self.masks):
            if s.shape[-2] != K or a.shape[-1] != K or a.shape[-2] != N:
                raise DimensionError("slot counts or patch counts disagree across layers")

    @property
    def M(self):
        return len(self.slot_sets)


def align_family(family):
    """Chain-align an unbatched family; returns ``(aligned family, permutations)``.

    ``permutations[0]`` is the identity; ``permutations[m]`` reorders layer ``m`` onto
    the aligned layer ``m - 1``.
    """
    K = family.slot_sets[0].shape[-2]
    slots = [family.slot_sets[0]]
    masks = [family.masks[0]]
    perms = [np.arange(K)]
    for m in range(1, family.M):
        perm = match_masks(masks[-1], family.masks[m])
        idx = torch.as_tensor(perm, device=family.masks[m].device)
        slots.append(family.slot_sets[m][idx])
        masks.append(family.masks[m][:, idx])
        perms.append(perm)
    return SlotFamily(slots, masks, aligned=True), perms


def align_batch(slot_sets, masks):
    """Batched chain alignment, each image matched independently.

    ``slot_sets``: list of ``[B, K, D]``; ``masks``: list of ``[B, N, K]``.
    Gradients flow through the gathered values, not through the permutation choice.
    """
    B, K = slot_sets[0].shape[:2]
    out_slots, out_masks = [slot_sets[0]], [masks[0]]
    perms = [np.tile(np.arange(K), (B, 1))]
    for m in range(1, len(slot_sets)):
        ref = binarize_mask(out_masks[-1].detach())
        cur = binarize_mask(masks[m].detach())
        perm = np.stack([hungarian_match(pairwise_miou_cost(ref[b], cur[b]).numpy()) for b in range(B)])
        idx = torch.as_tensor(perm, device=slot_sets[m].device)
        out_slots.append(torch.gather(slot_sets[m], 1, idx[:, :, None].expand(-1, -1, slot_sets[m].shape[-1])))
        out_masks.append(torch.gather(masks[m], 2, idx[:, None, :].expand(-1, masks[m].shape[1], -1)))
        perms.append(perm)
    return out_slots, out_masks, np.stack(perms)


class SlotFusion(nn.Module):
    """Fuses aligned per-layer slots and masks into one slot set and one mask.

    With a single layer both fusions are pass-throughs and no parameters are created.
    """

    def __init__(
        self,
        n_layers,
        d_slot,
        strategy="m_fusion",
        hidden=768,
        mask_weights="uniform",
        t_heads=4,
    ):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown fusion strategy {strategy!r}")
        if mask_weights not in MASK_WEIGHT_MODES:
            raise ConfigurationError(f"unknown mask weight mode {mask_weights!r}")
        M = n_layers
        if M < 1:
            raise ConfigurationError("need at least one layer")
        self.n_layers = M
        self.d_slot = d_slot
        self.strategy = strategy
        self.mask_weight_mode = mask_weights
        self.mlp = None
        self.proj = None
        self.block = None
        self.mask_logits = None
        if M == 1:
            return
        n_inputs = M if strategy == "concat_fusion" else M - 1
        if strategy in ("m_fusion", "concat_fusion"):
            self.mlp = nn.Sequential(
                nn.Linear(n_inputs * d_slot, hidden), nn.GELU(), nn.Linear(hidden, d_slot)
            )
        elif strategy == "t_fusion":
            self.proj = nn.Linear(n_inputs * d_slot, d_slot)
            self.block = TransformerBlock(d_slot, t_heads)
        if mask_weights == "learned" and strategy != "avg_fusion":
            self.mask_logits = nn.Parameter(torch.zeros(n_inputs))

    @property
    def n_mask_weights(self):
        if self.n_layers == 1 or self.strategy == "avg_fusion":
            return 0
        return self.n_layers if self.strategy == "concat_fusion" else self.n_layers - 1

    def mask_weights(self, dtype=torch.float32):
        """Convex weights over the mask terms (softmax of logits, or uniform)."""
        n = self.n_mask_weights
        if self.mask_logits is not None:
            return self.mask_logits.softmax(dim=0)
        return torch.full((n,), 1.0 / n, dtype=dtype) if n else torch.ones(0, dtype=dtype)

    def _check(self, items):
        if len(items) != self.n_layers:
            raise ConfigurationError(f"fusion built for {self.n_layers} layers, got {len(items)}")

    def pairwise_sums(self, items):
        return [a + b for a, b in zip(items[:-1], items[1:])]

    def fuse_slots(self, slots):
        """``slots``: list of M aligned ``[..., K, d_slot]`` tensors."""
        self._check(slots)
        if self.n_layers == 1:
            return slots[0]
        if self.strategy == "avg_fusion":
            return torch.stack(slots).mean(dim=0)
        if self.strategy == "concat_fusion":
            return self.mlp(torch.cat(slots, dim=-1))
        z = torch.cat(self.pairwise_sums(slots), dim=-1)
        if self.strategy == "m_fusion":
            return self.mlp(z)
        squeeze = z.dim() == 2
        x = self.proj(z.unsqueeze(0) if squeeze else z)
        x = self.block(x)
        return x[0] if squeeze else x

    def fuse_masks(self, masks, weights=None):
        """``masks``: list of M aligned ``[..., N, K]`` row-stochastic masks.

        Pairwise strategies return rows summing to 2; ``avg_fusion`` and
        ``concat_fusion`` combine the layer masks directly (rows sum to 1).
        """
        self._check(masks)
        if self.n_layers == 1:
            return masks[0]
        if self.strategy == "avg_fusion":
            return torch.stack(masks).mean(dim=0)
        terms = masks if self.strategy == "concat_fusion" else self.pairwise_sums(masks)
        if weights is None:
            weights = self.mask_weights(masks[0].dtype)
        if len(weights) != len(terms):
            raise ConfigurationError(f"expected {len(terms)} mask weights, got {len(weights)}")
        return sum(w * z for w, z in zip(weights.to(masks[0].dtype), terms))

    def forward(self, slots, masks):
        return self.fuse_slots(slots), self.fuse_masks(masks)


def fuse_slots(family, params):
    if not family.aligned:
        raise ConfigurationError("fuse_slots expects an aligned family")
    _check_minimum(family.M, params.strategy)
    return params.fuse_slots(family.slot_sets)


def fuse_masks(family, params, weights=None):
    if not family.aligned:
        raise ConfigurationError("fuse_masks expects an aligned family")
    return params.fuse_masks(family.masks, weights)


def _check_minimum(M, strategy):
    if strategy != "avg_fusion" and M < 2:
        raise ConfigurationError(f"{strategy} needs at least two layers, got {M}")

"""Segmentation label maps from attention masks and unsupervised segmentation metrics."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, UndefinedInputError, UnsupportedError

IGNORE_ID = -1
BACKGROUND_ID = 0
METRICS = ("miou", "mbo_i", "mbo_c", "fg_ari")
VARIANTS = ("slot", "decoder")


@dataclass
class GroundTruth:
    instances: np.ndarray
    classes: np.ndarray = None


def label_map_from_attention(mask, grid, eval_res):
    """Upsample each slot channel bilinearly to ``eval_res`` and take the per-pixel argmax.

    ``mask`` is ``N x K`` with ``N = grid[0] * grid[1]`` in raster order. Ties go to the
    lowest slot index.
    """
    m = torch.as_tensor(mask).detach().to(torch.float64)
    H, W = grid
    if m.dim() != 2 or m.shape[0] != H * W:
        raise DimensionError(f"mask with {m.shape[0]} rows does not fit grid {grid}")
    chans = m.T.reshape(1, -1, H, W)
    if tuple(eval_res) != (H, W):
        chans = F.interpolate(chans, size=tuple(eval_res), mode="bilinear", align_corners=False)
    return chans[0].argmax(dim=0).numpy().astype(np.int64)


def _contingency(a, b):
    """Overlap counts between segments of two flat labelings; returns (table, a_ids, b_ids)."""
    a_ids, a_inv = np.unique(a, return_inverse=True)
    b_ids, b_inv = np.unique(b, return_inverse=True)
    table = np.zeros((len(a_ids), len(b_ids)), dtype=np.int64)
    np.add.at(table, (a_inv, b_inv), 1)
    return table, a_ids, b_ids


def iou_matrix(pred, gt, include_background=True, background_id=BACKGROUND_ID, ignore_id=IGNORE_ID):
    """IoU between every non-empty gt segment (rows) and every predicted segment (columns)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    valid = gt != ignore_id
    p, g = pred[valid].ravel(), gt[valid].ravel()
    table, g_ids, _ = _contingency(g, p)
    g_area = table.sum(axis=1)
    p_area = table.sum(axis=0)
    if not include_background:
        keep = g_ids != background_id
        table, g_area = table[keep], g_area[keep]
    if table.shape[0] == 0:
        raise UndefinedInputError("ground truth has no segment to evaluate")
    union = g_area[:, None] + p_area[None, :] - table
    return table / union


def miou_metric(pred, gt, include_background=True):
    """Mean over gt segments of the IoU under an exclusive optimal matching.

    The IoU matrix is padded to square with zeros, so gt segments left without a
    predicted partner contribute 0.
    """
    iou = iou_matrix(pred, gt, include_background)
    G, P = iou.shape
    n = max(G, P)
    padded = np.zeros((n, n))
    padded[:G, :P] = iou
    rows, cols = linear_sum_assignment(padded, maximize=True)
    matched = padded[rows, cols]
    return math.fsum(matched[rows < G]) / G


def mbo(pred, gt, include_background=True):
    iou = iou_matrix(pred, gt, include_background)
    return math.fsum(iou.max(axis=1)) / iou.shape[0]


def mbo_metric(pred, gt, level="instance", include_background=True):
    """Mean best overlap: each gt mask takes its best-IoU predicted segment (with replacement).

    ``gt`` is a :class:`GroundTruth` or a plain instance map.
    """
    if level not in ("instance", "class"):
        raise ValueError(f"unknown level {level!r}")
    if not isinstance(gt, GroundTruth):
        gt = GroundTruth(np.asarray(gt))
    if level == "class":
        if gt.classes is None:
            raise UnsupportedError("class-level mBO requires class annotations")
        return mbo(pred, gt.classes, include_background)
    return mbo(pred, gt.instances, include_background)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def adjusted_rand_index(a, b):
    """ARI between two flat labelings via pair counting on the contingency table."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    n = a.size
    table, _, _ = _contingency(a, b)
    sum_cells = math.fsum(_comb2(table).ravel())
    sum_a = math.fsum(_comb2(table.sum(axis=1)))
    sum_b = math.fsum(_comb2(table.sum(axis=0)))
    total = n * (n - 1) / 2.0
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both single-cluster (or both all-singletons): identical partitions
        return 1.0
    return (sum_cells - expected) / (max_index - expected)


def fg_ari(pred, gt, background_id=BACKGROUND_ID, ignore_id=IGNORE_ID):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    fg = (gt != background_id) & (gt != ignore_id)
    if not fg.any():
        raise UndefinedInputError("no foreground pixels")
    return adjusted_rand_index(pred[fg], gt[fg])


def image_metrics(pred, gt, include_background=True):
    """All metrics for one predicted label map; metrics that are undefined are omitted."""
    out = {
        "miou": miou_metric(pred, gt.instances, include_background),
        "mbo_i": mbo_metric(pred, gt, "instance", include_background),
    }
    if gt.classes is not None:
        out["mbo_c"] = mbo_metric(pred, gt, "class", include_background)
    try:
        out["fg_ari"] = fg_ari(pred, gt.instances)
    except UndefinedInputError:
        pass
    return out


@dataclass
class MetricsReport:
    """Dataset means per metric for slot and decoder masks, plus their maxima."""

    values: dict = field(default_factory=dict)  # metric -> {"slot": v, "decoder": v, "max": v}
    n_samples: int = 0

    @classmethod
    def from_samples(cls, per_variant):
        """``per_variant``: ``{variant: [per-image metric dicts]}``."""
        values = {}
        n = max(len(v) for v in per_variant.values())
        for metric in METRICS:
            row = {}
            for variant in VARIANTS:
                xs = [d[metric] for d in per_variant.get(variant, []) if metric in d]
                if xs:
                    row[variant] = math.fsum(xs) / len(xs)
            if row:
                row["max"] = max(row.values())
                values[metric] = row
        return cls(values, n)

    def get(self, metric, variant="max"):
        return self.values[metric][variant]

    def to_text(self):
        lines = [f"samples = {self.n_samples}"]
        for metric in METRICS:
            for variant in VARIANTS + ("max",):
                if metric in self.values and variant in self.values[metric]:
                    lines.append(f"{metric}.{variant} = {self.values[metric][variant]:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps({"samples": self.n_samples, "metrics": self.values}, indent=2, sort_keys=True) + "\n"

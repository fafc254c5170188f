"""Model evaluation: fused slot-attention and decoder masks scored against ground truth."""

import numpy as np
import torch

from .errors import CompatibilityError
from .features import FeatureExtractor
from .metrics import GroundTruth, MetricsReport, image_metrics, label_map_from_attention
from .training import load_model, step_generator

EVAL_STREAM = 2


@torch.no_grad()
def predict_masks(model, extractor, data, layer_ids, seed=0, batch_size=64, dtype=torch.float32):
    """Fused slot-attention masks and decoder masks ``[n, N, K]`` for every image of ``data``."""
    was_training = model.training
    model.eval()
    slot_masks, dec_masks = [], []
    for b, start in enumerate(range(0, len(data), batch_size)):
        images = torch.from_numpy(data.images[start:start + batch_size])
        ids = data.ids[start:start + batch_size]
        feats = extractor(images, list(layer_ids), ids=ids).to(dtype)
        out = model(feats, generator=step_generator(seed, b, stream=EVAL_STREAM))
        slot_masks.append(out.fused_mask.double())
        dec_masks.append(out.dec_mask.double())
    model.train(was_training)
    return torch.cat(slot_masks).numpy(), torch.cat(dec_masks).numpy()


def evaluate_masks(slot_masks, dec_masks, data, grid, eval_res=None, include_background=True):
    """Score per-image ``N x K`` masks of both sources; returns a :class:`MetricsReport`."""
    eval_res = tuple(eval_res) if eval_res else tuple(data.instances.shape[1:3])
    per_variant = {"slot": [], "decoder": []}
    for i in range(len(data)):
        gt = GroundTruth(data.instances[i], data.classes[i])
        if tuple(gt.instances.shape) != eval_res:
            gt = _resize_gt(gt, eval_res)
        for variant, masks in (("slot", slot_masks), ("decoder", dec_masks)):
            if masks is None:
                continue
            pred = label_map_from_attention(masks[i], grid, eval_res)
            per_variant[variant].append(image_metrics(pred, gt, include_background))
    return MetricsReport.from_samples({k: v for k, v in per_variant.items() if v})


def _resize_gt(gt, size):
    def nearest(m):
        H, W = m.shape
        rows = (np.arange(size[0]) + 0.5) * H / size[0]
        cols = (np.arange(size[1]) + 0.5) * W / size[1]
        return m[rows.astype(int)][:, cols.astype(int)]

    return GroundTruth(nearest(gt.instances), None if gt.classes is None else nearest(gt.classes))


def evaluate_trainer(trainer, data):
    cfg = trainer.config
    slot, dec = predict_masks(
        trainer.model, trainer.extractor, data, cfg.layer_ids, seed=cfg.seed,
        batch_size=cfg.batch_size, dtype=trainer.dtype,
    )
    res = (cfg.eval_res, cfg.eval_res) if cfg.eval_res else None
    return evaluate_masks(slot, dec, data, trainer.grid, res, cfg.include_background)


def evaluate_model(checkpoint, data, eval_res=None):
    """Evaluate a checkpoint on an in-memory split; the split must match the training dataset."""
    if checkpoint.dataset_hash is not None and data.spec_hash != checkpoint.dataset_hash:
        raise CompatibilityError(
            f"checkpoint was trained on dataset {checkpoint.dataset_hash}, got {data.spec_hash}"
        )
    config, model = load_model(checkpoint)
    extractor = FeatureExtractor(config.backend)
    grid = tuple(checkpoint.extra["grid"])
    slot, dec = predict_masks(
        model, extractor, data, config.layer_ids, seed=config.seed,
        batch_size=config.batch_size, dtype=getattr(torch, config.dtype),
    )
    if eval_res is None and config.eval_res:
        eval_res = (config.eval_res, config.eval_res)
    return evaluate_masks(slot, dec, data, grid, eval_res, config.include_background)

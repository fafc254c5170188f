"""Losses, learning-rate schedule and the single-phase / self-distillation training loops."""

import logging
import math
import os

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import TrainConfig, config_hash, from_ini_text, to_ini_text
from .data import load_split, preprocess
from .errors import CompatibilityError, ConfigurationError, DimensionError, NumericError
from .features import FeatureExtractor
from .fusion import binarize_mask, hungarian_match, pairwise_miou_cost
from .model import ModelConfig, MultiLayerSlotModel, SingleLayerSlotModel, reconstruction_loss

log = logging.getLogger(__name__)

DECODE_ORDERS = ("raster", "reverse", "column", "column_reverse")


def lr_at_step(step, total_steps, warmup_steps, lr_main, lr_low):
    """Linear warm-up to ``lr_main`` then cosine annealing down to ``lr_low``."""
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_main * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0), span) / span
    return lr_low + 0.5 * (lr_main - lr_low) * (1.0 + math.cos(math.pi * progress))


def distillation_loss(teacher_mask, student_mask, lam, soft=False, eps=1e-8):
    """Cross-entropy between the teacher's mask and the column-aligned student mask.

    Student columns are matched to teacher columns per image (Hungarian on binarised-mask
    IoU). Student rows are normalised by their sum. Hard targets are the teacher argmax;
    with ``soft`` the row-normalised teacher mask is used as target distribution. The
    teacher side never receives gradients. Accepts ``[N, K]`` or ``[B, N, K]`` masks.
    """
    if teacher_mask.shape != student_mask.shape:
        raise DimensionError(f"mask shapes differ: {tuple(teacher_mask.shape)} vs {tuple(student_mask.shape)}")
    unbatched = teacher_mask.dim() == 2
    t = teacher_mask.detach()
    s = student_mask
    if unbatched:
        t, s = t.unsqueeze(0), s.unsqueeze(0)
    t_bin, s_bin = binarize_mask(t), binarize_mask(s.detach())
    perms = np.stack([
        hungarian_match(pairwise_miou_cost(t_bin[b], s_bin[b]).numpy()) for b in range(t.shape[0])
    ])
    idx = torch.as_tensor(perms, device=s.device)[:, None, :].expand(-1, s.shape[1], -1)
    s = torch.gather(s, 2, idx)
    probs = s / s.sum(dim=-1, keepdim=True).clamp_min(eps)
    logp = probs.clamp_min(eps).log()
    if soft:
        q = t / t.sum(dim=-1, keepdim=True).clamp_min(eps)
        ce = -(q * logp).sum(dim=-1)
    else:
        ce = -logp.gather(2, t.argmax(dim=-1, keepdim=True)).squeeze(-1)
    return lam * ce.mean()


def decode_order(name, grid):
    H, W = grid
    raster = np.arange(H * W).reshape(H, W)
    if name == "raster":
        return raster.ravel()
    if name == "reverse":
        return raster.ravel()[::-1].copy()
    if name == "column":
        return raster.T.ravel()
    if name == "column_reverse":
        return raster.T.ravel()[::-1].copy()
    raise ConfigurationError(f"unknown decoding order {name!r}; choose from {DECODE_ORDERS}")


def model_config(config, d_emb, grid, mask_weights=None):
    return ModelConfig(
        d_emb=d_emb,
        n_patches=grid[0] * grid[1],
        n_layers=config.n_layers,
        n_slots=config.n_slots,
        d_slot=config.d_slot,
        sa_iters=config.sa_iters,
        sa_mlp_hidden=config.sa_mlp_hidden,
        slot_init=config.slot_init,
        fusion=config.fusion,
        fusion_hidden=config.fusion_hidden,
        mask_weights=mask_weights or config.mask_weights,
        decoder=config.decoder,
        dec_width=config.dec_width,
        dec_layers=config.dec_layers,
        dec_heads=config.dec_heads,
        dec_hidden=config.dec_hidden,
        dec_order=decode_order(config.dec_order, grid),
    )


def build_model(config, d_emb, grid, mask_weights=None):
    """Model for ``config``; parameter initialisation is seeded by ``config.seed``."""
    cfg = model_config(config, d_emb, grid, mask_weights)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SingleLayerSlotModel(cfg) if config.architecture == "single" else MultiLayerSlotModel(cfg)
    return model.to(getattr(torch, config.dtype))


def step_generator(seed, step, stream=0):
    """Generator for the slot-initialisation noise of one training step."""
    state = np.random.SeedSequence([int(seed), int(step), int(stream)]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 32 | int(state[1]))
    return g


class Trainer:
    """Owns the model, optimiser and step counter for one training phase.

    ``kind`` is ``"single"`` (plain reconstruction), ``"teacher"`` (same, first phase of
    self-distillation) or ``"student"`` (reconstruction plus distillation from ``teacher``).
    All randomness is a function of ``(config.seed, step)``, so training resumes exactly.
    """

    def __init__(self, config, train=None, kind="single", teacher=None):
        if kind not in ("single", "teacher", "student"):
            raise ConfigurationError(f"unknown training phase {kind!r}")
        if kind == "student" and teacher is None:
            raise ConfigurationError("the student phase needs a teacher model")
        self.config = config
        self.kind = kind
        self.dtype = getattr(torch, config.dtype)
        self.train_data = train if train is not None else load_split(config.data_path, config.train_split)
        self.extractor = FeatureExtractor(config.backend)
        H, W = self.train_data.images.shape[1:3]
        self.extractor.check(H, W, list(config.layer_ids))
        self.grid = self.extractor.grid(H, W)
        probe = self.features(np.arange(1), epoch=None)
        self.d_emb = probe.shape[-1]
        mask_weights = config.student_mask_weights if kind == "student" else config.mask_weights
        self.model = build_model(config, self.d_emb, self.grid, mask_weights)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.lr_main, betas=(config.beta1, config.beta2), weight_decay=0.0
        )
        self.teacher = teacher
        if teacher is not None:
            teacher.requires_grad_(False)
            teacher.eval()
        self.step = 0
        self.history = []
        self.epochs = {"single": config.epochs, "teacher": config.teacher_epochs, "student": config.student_epochs}[kind]
        self.steps_per_epoch = math.ceil(len(self.train_data) / config.batch_size)
        self.total_steps = self.epochs * self.steps_per_epoch
        if config.warmup_steps >= self.total_steps:
            log.warning("warm-up (%d) not shorter than the run (%d steps)", config.warmup_steps, self.total_steps)

    # -- data ---------------------------------------------------------------------------

    def features(self, index, epoch):
        """Features ``[B, M, N, d_emb]`` for training images ``index``; ``epoch=None`` disables augmentation."""
        cfg = self.config
        data = self.train_data
        side = min(data.images.shape[1:3])
        images = []
        for i in index:
            if epoch is None or cfg.backend.kind == "file":
                images.append(data.images[i])
                continue
            rng = np.random.default_rng([cfg.seed, int(epoch), int(i), 17])
            img, _ = preprocess(data.images[i], "train", side, crop=cfg.crop, flip=cfg.flip, rng=rng)
            images.append(img)
        ids = [data.ids[i] for i in index]
        feats = self.extractor(torch.from_numpy(np.stack(images)), list(cfg.layer_ids), ids=ids)
        return feats.to(self.dtype)

    def batch_indices(self, epoch):
        order = np.random.default_rng([self.config.seed, int(epoch)]).permutation(len(self.train_data))
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    # -- optimisation -------------------------------------------------------------------

    def losses(self, features, step):
        out = self.model(features, generator=step_generator(self.config.seed, step))
        rec = reconstruction_loss(features[:, -1], out.recon)
        parts = {"rec": rec}
        loss = rec
        if self.teacher is not None:
            with torch.no_grad():
                t_out = self.teacher(features, generator=step_generator(self.config.seed, step, stream=1))
            distill = distillation_loss(
                t_out.fused_mask, out.fused_mask, self.config.distill_lambda, soft=self.config.distill_soft
            )
            parts["distill"] = distill
            loss = rec + distill
        parts["loss"] = loss
        return parts, out

    def train_step(self, features):
        cfg = self.config
        lr = lr_at_step(self.step + 1, self.total_steps, cfg.warmup_steps, cfg.lr_main, cfg.lr_low)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        parts, _ = self.losses(features, self.step)
        loss = parts["loss"]
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        record = {k: float(v.detach()) for k, v in parts.items()}
        record["lr"] = lr
        return record

    def run_steps(self, max_steps=None):
        """Train until the phase is complete (or ``max_steps`` total steps); yields step records."""
        limit = self.total_steps if max_steps is None else min(self.total_steps, max_steps)
        while self.step < limit:
            epoch, pos = divmod(self.step, self.steps_per_epoch)
            index = self.batch_indices(epoch)[pos]
            yield self.train_step(self.features(index, epoch))

    def train_epoch(self):
        """One full epoch from the current position; returns the mean loss."""
        epoch = self.step // self.steps_per_epoch
        end = (epoch + 1) * self.steps_per_epoch
        losses = [rec["loss"] for rec in self.run_steps(max_steps=end)]
        return math.fsum(losses) / max(len(losses), 1)

    @property
    def epoch(self):
        return self.step // self.steps_per_epoch

    # -- persistence --------------------------------------------------------------------

    def checkpoint(self):
        ckpt = Checkpoint(
            config_text=to_ini_text(self.config),
            config_hash=config_hash(self.config),
            step=self.step,
            epoch=self.epoch,
            kind=self.kind,
            dataset_hash=self.train_data.spec_hash,
            history=list(self.history),
            model_state=self.model.state_dict(),
            optim_state=self.optimizer.state_dict(),
            extra={"d_emb": self.d_emb, "grid": list(self.grid)},
        )
        if self.teacher is not None:
            ckpt.teacher_state = self.teacher.state_dict()
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt, train=None):
        config = from_ini_text(TrainConfig, ckpt.config_text)
        if config_hash(config) != ckpt.config_hash:
            raise CompatibilityError("checkpoint config hash does not match its config text")
        teacher = None
        if ckpt.kind == "student":
            teacher = build_model(config, ckpt.extra["d_emb"], tuple(ckpt.extra["grid"]))
            teacher.load_state_dict(ckpt.teacher_state)
        trainer = cls(config, train=train, kind=ckpt.kind, teacher=teacher)
        if train is not None and ckpt.dataset_hash != train.spec_hash:
            raise CompatibilityError("checkpoint was trained on a different dataset")
        trainer.model.load_state_dict(ckpt.model_state)
        if ckpt.optim_state is not None:
            trainer.optimizer.load_state_dict(ckpt.optim_state)
        trainer.step = ckpt.step
        trainer.history = list(ckpt.history)
        return trainer


def load_model(ckpt):
    """Rebuild the trained model of a checkpoint (no data needed)."""
    config = from_ini_text(TrainConfig, ckpt.config_text)
    d_emb, grid = ckpt.extra["d_emb"], tuple(ckpt.extra["grid"])
    mask_weights = config.student_mask_weights if ckpt.kind == "student" else config.mask_weights
    model = build_model(config, d_emb, grid, mask_weights)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return config, model


def _run_phase(trainer, out_dir=None, evaluation=None, max_steps=None, on_epoch=None):
    from .evaluate import evaluate_trainer

    cfg = trainer.config
    best = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    limit = trainer.total_steps if max_steps is None else min(max_steps, trainer.total_steps)
    while trainer.step < limit:
        epoch = trainer.epoch
        end = min((epoch + 1) * trainer.steps_per_epoch, limit)
        try:
            losses = [rec["loss"] for rec in trainer.run_steps(max_steps=end)]
        except NumericError:
            if out_dir:
                trainer.checkpoint().save(os.path.join(out_dir, "aborted.ckpt"))
            raise
        entry = {"epoch": epoch + 1, "step": trainer.step, "loss": math.fsum(losses) / max(len(losses), 1)}
        epoch_done = trainer.step % trainer.steps_per_epoch == 0
        if evaluation is not None and cfg.eval_every > 0 and epoch_done and (epoch + 1) % cfg.eval_every == 0:
            report = evaluate_trainer(trainer, evaluation)
            entry["metrics"] = report.values
        if trainer.model.__class__ is MultiLayerSlotModel and trainer.model.fusion.n_mask_weights:
            entry["mask_weights"] = trainer.model.fusion.mask_weights().detach().cpu().tolist()
        trainer.history.append(entry)
        log.info("phase=%s epoch=%d step=%d loss=%.6f", trainer.kind, entry["epoch"], trainer.step, entry["loss"])
        if on_epoch is not None:
            on_epoch(trainer, entry)
        if out_dir:
            ckpt = trainer.checkpoint()
            ckpt.save(os.path.join(out_dir, "last.ckpt"))
            if "metrics" in entry:
                score = entry["metrics"]["mbo_i"]["max"]
                if best is None or score > best:
                    best = score
                    ckpt.save(os.path.join(out_dir, "best.ckpt"))
    return trainer.checkpoint()


def _load_data(config, train, evaluation):
    train = train if train is not None else load_split(config.data_path, config.train_split)
    if evaluation is None and config.eval_every > 0:
        try:
            evaluation = load_split(config.data_path, config.eval_split)
        except FileNotFoundError:
            evaluation = None
    if evaluation is not None:
        evaluation = evaluation.subset(config.eval_limit)
    return train, evaluation


def train_single_phase(config, out_dir=None, train=None, evaluation=None, max_steps=None, on_epoch=None, kind="single"):
    """Reconstruction-only training of the full multi-layer pipeline; returns the final checkpoint."""
    train, evaluation = _load_data(config, train, evaluation)
    trainer = Trainer(config, train=train, kind=kind)
    return _run_phase(trainer, out_dir, evaluation, max_steps, on_epoch)


def train_self_distilled(config, out_dir=None, train=None, evaluation=None, max_steps=None, on_epoch=None):
    """Teacher phase, then a fresh student distilled from the frozen teacher's fused masks.

    Returns the student checkpoint (which embeds the teacher parameters).
    """
    train, evaluation = _load_data(config, train, evaluation)
    teacher_dir = os.path.join(out_dir, "teacher") if out_dir else None
    teacher_trainer = Trainer(config, train=train, kind="teacher")
    _run_phase(teacher_trainer, teacher_dir, evaluation, max_steps, on_epoch)
    teacher = teacher_trainer.model
    student = Trainer(config, train=train, kind="student", teacher=teacher)
    return _run_phase(student, out_dir, evaluation, max_steps, on_epoch)


def resume(ckpt, train=None):
    """Trainer positioned right after the checkpointed step."""
    return Trainer.from_checkpoint(ckpt, train=train)


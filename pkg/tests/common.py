"""Shared fixtures: a tiny in-memory shapes split, a tiny training config, finite differences."""

import numpy as np
import torch

from mufasa.config import TrainConfig
from mufasa.data import SceneSpec, SplitData, render_scene
from mufasa.features import FeatureBackendConfig
from mufasa.model import reconstruction_loss
from mufasa.training import build_model


def tiny_split(n=8, size=16, seed=0):
    spec = SceneSpec(image_size=size, min_objects=1, max_objects=2, min_size=4, max_size=8, seed=seed)
    scenes = [render_scene(spec, np.random.default_rng([seed, i])) for i in range(n)]
    instances = np.stack([s.instances.astype(np.int64) for s in scenes])
    classes = np.stack([
        np.array([0] + [c + 1 for c in s.class_ids], dtype=np.int64)[s.instances] for s in scenes
    ])
    images = np.stack([s.image for s in scenes]).astype(np.float32) / 255.0
    return SplitData(images, instances, classes, [f"{i:05d}" for i in range(n)], spec.digest())


def tiny_config(**changes):
    base = dict(
        layer_ids=(1, 2), n_slots=3, d_slot=8, sa_iters=2, sa_mlp_hidden=16, fusion_hidden=16,
        decoder="mlp", dec_hidden=16, dec_layers=2, dec_width=8, dec_heads=2,
        epochs=2, teacher_epochs=1, student_epochs=1, batch_size=4, warmup_steps=2,
        lr_main=1e-3, lr_low=1e-5, eval_every=0, flip=False,
        backend=FeatureBackendConfig(patch_size=4, radii=(0, 1), pos_dim=4),
    )
    base.update(changes)
    return TrainConfig(**base)


def model_loss(model, features, seed=3):
    gen = torch.Generator().manual_seed(seed)
    out = model(features, generator=gen)
    return reconstruction_loss(features[:, -1], out.recon)


def finite_difference_error(config, features, step=1e-5):
    """Largest gap between analytic and central-difference gradients, relative to the gradient scale.

    The error is ``max_i |g_fd_i - g_an_i| / max_i |g_an_i|`` over every trainable parameter.
    """
    model = build_model(config, features.shape[-1], (4, 4)).double()
    loss = model_loss(model, features)
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params)
    analytic = torch.cat([g.reshape(-1) for g in grads])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = model_loss(model, features).item()
                flat[i] = orig - step
                down = model_loss(model, features).item()
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return float((numeric - analytic).abs().max() / analytic.abs().max())

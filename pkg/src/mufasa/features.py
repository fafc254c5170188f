"""Multi-layer patch features: frozen backends, the MUFE feature file, PCA visualisation.

Two desk-scale stand-ins for a pre-trained ViT encoder are provided:

* ``tiny_vit`` -- a frozen, randomly initialised ViT whose block outputs are the layers.
* ``handcrafted`` -- per-patch mean colour concatenated with a 2-D sinusoidal position
  code, box-smoothed over the patch grid with one radius per pseudo-layer.

A third kind, ``file``, reads stacks previously written with :func:`write_feature_file`
(for instance dumps of a real encoder).
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, CorruptionError, DimensionError, FormatError, LayerRangeError
from .layers import TransformerBlock, sinusoidal_grid_code

MAGIC = b"MUFE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIHH")
_LAYER_ID = struct.Struct("<I")


@dataclass
class FeatureStack:
    """Features of one image at M selected encoder layers.

    ``layers`` has shape ``[M, N, d_emb]``; ``grid`` is ``(H_emb, W_emb)`` with
    ``H_emb * W_emb == N``.
    """

    layers: np.ndarray
    layer_ids: list
    grid: tuple

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        self.layer_ids = [int(i) for i in self.layer_ids]
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if self.layers.ndim != 3:
            raise DimensionError(f"expected [M, N, d_emb] layers, got shape {self.layers.shape}")
        M, N, _ = self.layers.shape
        if M < 1 or M != len(self.layer_ids):
            raise DimensionError(f"{M} layer matrices but {len(self.layer_ids)} layer ids")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ConfigurationError(f"layer ids must be strictly increasing, got {self.layer_ids}")
        if self.grid[0] * self.grid[1] != N:
            raise DimensionError(f"grid {self.grid} does not hold {N} patches")
        if not np.isfinite(self.layers).all():
            raise ValueError("feature stack contains non-finite entries")

    @property
    def M(self):
        return self.layers.shape[0]

    @property
    def N(self):
        return self.layers.shape[1]

    @property
    def d_emb(self):
        return self.layers.shape[2]


@dataclass
class FeatureBackendConfig:
    kind: str = "handcrafted"
    patch_size: int = 8
    # tiny_vit
    depth: int = 4
    heads: int = 4
    d_emb: int = 64
    seed: int = 0
    # handcrafted
    radii: tuple = (0, 1)
    pos_dim: int = 8
    color_scale: float = 4.0
    color_offset: float = 0.0
    pos_scale: float = 1.0
    # file
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("tiny_vit", "handcrafted", "file"):
            raise ConfigurationError(f"unknown feature backend {self.kind!r}")
        self.radii = tuple(int(r) for r in self.radii)
        if self.kind == "handcrafted" and (not self.radii or min(self.radii) < 0):
            raise ConfigurationError("handcrafted backend needs one non-negative radius per pseudo-layer")
        if self.kind == "file" and not self.path:
            raise ConfigurationError("file backend needs a path")
        if self.patch_size < 1:
            raise ConfigurationError("patch size must be positive")


class TinyViT(nn.Module):
    """Frozen randomly initialised ViT; the output of block ``i`` is layer ``i`` (1-based)."""

    def __init__(self, patch_size=8, depth=4, heads=4, d_emb=64, in_channels=3, seed=0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_size = patch_size
            self.embed = nn.Linear(patch_size * patch_size * in_channels, d_emb)
            self.blocks = nn.ModuleList(TransformerBlock(d_emb, heads) for _ in range(depth))
        self.d_emb = d_emb
        self.requires_grad_(False)
        self.eval()

    @property
    def depth(self):
        return len(self.blocks)

    @torch.no_grad()
    def forward(self, images, layer_ids):
        p = self.patch_size
        B, H, W, C = images.shape
        x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(B, (H // p) * (W // p), p * p * C).to(self.embed.weight.dtype)
        pos = sinusoidal_grid_code(H // p, W // p, self.d_emb, dtype=x.dtype)
        x = self.embed(x) + pos
        wanted = set(layer_ids)
        out = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in wanted:
                out.append(x)
        return torch.stack(out, dim=1)


class HandcraftedBackend:
    """Mean patch colour plus position code, box-smoothed per pseudo-layer.

    Colours enter as ``(mean - color_offset) * color_scale``; an offset of 0.5 centres
    pixel values, so a dark background does not reduce to its position code under
    the slot-attention LayerNorm.
    """

    def __init__(self, patch_size=8, radii=(0, 1), pos_dim=8, color_scale=4.0, pos_scale=1.0, color_offset=0.0):
        self.patch_size = patch_size
        self.radii = tuple(radii)
        self.pos_dim = pos_dim
        self.color_scale = color_scale
        self.color_offset = color_offset
        self.pos_scale = pos_scale

    @property
    def depth(self):
        return len(self.radii)

    def d_emb(self, channels=3):
        return channels + self.pos_dim

    @torch.no_grad()
    def __call__(self, images, layer_ids):
        p = self.patch_size
        B, H, W, C = images.shape
        he, we = H // p, W // p
        # float64 pooling keeps constant regions exactly constant after the final cast
        color = (F.avg_pool2d(images.permute(0, 3, 1, 2).double(), p) - self.color_offset) * self.color_scale
        pos = sinusoidal_grid_code(he, we, self.pos_dim, dtype=torch.float64) * self.pos_scale
        pos = pos.T.reshape(1, self.pos_dim, he, we).expand(B, -1, -1, -1)
        grid = torch.cat([color, pos], dim=1)
        out = []
        for i in layer_ids:
            r = self.radii[i - 1]
            smoothed = grid if r == 0 else F.avg_pool2d(
                grid, 2 * r + 1, stride=1, padding=r, count_include_pad=False
            )
            out.append(smoothed.flatten(2).transpose(1, 2))
        return torch.stack(out, dim=1).to(images.dtype)


class FileBackend:
    """Serves stacks stored as ``<path>/<image id>.mufe``."""

    def __init__(self, path):
        self.path = path

    def load(self, image_id, layer_ids):
        stack = load_feature_file(os.path.join(self.path, f"{image_id}.mufe"))
        missing = [i for i in layer_ids if i not in stack.layer_ids]
        if missing:
            raise LayerRangeError(f"layers {missing} not present in feature file for {image_id}")
        rows = [stack.layer_ids.index(i) for i in layer_ids]
        return torch.from_numpy(stack.layers[rows].copy())


@dataclass
class FeatureExtractor:
    """Batched access to a backend, producing ``[B, M, N, d_emb]`` tensors."""

    config: FeatureBackendConfig
    backend: object = field(init=False)

    def __post_init__(self):
        cfg = self.config
        if cfg.kind == "tiny_vit":
            self.backend = TinyViT(cfg.patch_size, cfg.depth, cfg.heads, cfg.d_emb, seed=cfg.seed)
        elif cfg.kind == "handcrafted":
            self.backend = HandcraftedBackend(
                cfg.patch_size, cfg.radii, cfg.pos_dim, cfg.color_scale, cfg.pos_scale, cfg.color_offset
            )
        else:
            self.backend = FileBackend(cfg.path)

    @property
    def depth(self):
        return None if self.config.kind == "file" else self.backend.depth

    @property
    def patch_size(self):
        return self.config.patch_size

    def d_emb(self, channels=3):
        if self.config.kind == "tiny_vit":
            return self.config.d_emb
        if self.config.kind == "handcrafted":
            return self.backend.d_emb(channels)
        return None

    def grid(self, height, width):
        return height // self.patch_size, width // self.patch_size

    def check(self, height, width, layer_ids):
        p = self.patch_size
        if height % p or width % p:
            raise ConfigurationError(f"image size {height}x{width} not divisible by patch size {p}")
        if not layer_ids:
            raise ConfigurationError("at least one layer id is required")
        if any(b <= a for a, b in zip(layer_ids, layer_ids[1:])):
            raise ConfigurationError(f"layer ids must be strictly increasing, got {list(layer_ids)}")
        depth = self.depth
        for i in layer_ids:
            if i < 1 or (depth is not None and i > depth):
                raise LayerRangeError(f"layer id {i} outside 1..{depth}")

    def __call__(self, images, layer_ids, ids=None):
        """``images``: float tensor ``[B, H, W, C]`` in [0, 1]."""
        images = torch.as_tensor(images)
        _, H, W, _ = images.shape
        layer_ids = [int(i) for i in layer_ids]
        self.check(H, W, layer_ids)
        if self.config.kind == "file":
            if ids is None:
                raise ConfigurationError("the file backend needs image ids")
            return torch.stack([self.backend.load(i, layer_ids) for i in ids])
        return self.backend(images.float(), layer_ids)


def extract_features(images, backend, layer_ids, ids=None):
    """Return one :class:`FeatureStack` per image of the ``[B, H, W, C]`` batch."""
    extractor = backend if isinstance(backend, FeatureExtractor) else FeatureExtractor(backend)
    images = np.asarray(images, dtype=np.float32)
    feats = extractor(torch.from_numpy(images), layer_ids, ids=ids)
    grid = extractor.grid(images.shape[1], images.shape[2])
    return [FeatureStack(f.numpy(), list(layer_ids), grid) for f in feats]


def write_feature_file(path, stack):
    M, N, d = stack.layers.shape
    H, W = stack.grid
    payload = [_HEADER.pack(MAGIC, VERSION, M, N, d, H, W)]
    for layer_id, mat in zip(stack.layer_ids, stack.layers):
        payload.append(_LAYER_ID.pack(layer_id))
        payload.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(payload))


def load_feature_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, M, N, d, H, W = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    record = _LAYER_ID.size + 4 * N * d
    if len(data) != _HEADER.size + M * record:
        raise CorruptionError(
            f"{path}: header declares {M}x{N}x{d} but payload holds {len(data) - _HEADER.size} bytes"
        )
    layer_ids, layers = [], []
    offset = _HEADER.size
    for _ in range(M):
        (layer_id,) = _LAYER_ID.unpack_from(data, offset)
        offset += _LAYER_ID.size
        mat = np.frombuffer(data, dtype="<f4", count=N * d, offset=offset).reshape(N, d)
        offset += 4 * N * d
        layer_ids.append(layer_id)
        layers.append(mat.astype(np.float32))
    return FeatureStack(np.stack(layers), layer_ids, (H, W))


def principal_components(features, k=3):
    """Mean, top-``k`` components (rows) and singular values of an ``N x d`` matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected an N x d matrix, got shape {x.shape}")
    if x.shape[0] < k:
        raise DimensionError(f"need at least {k} rows for {k} components, got {x.shape[0]}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return mean, comps, s[:k]


def pca_project(features, k=3):
    """Project onto the top ``k`` principal components and min-max scale each channel to [0, 1].

    Channels without variance (including components beyond the rank) are set to 0.5.
    """
    x = np.asarray(features, dtype=np.float64)
    mean, comps, s = principal_components(x, k)
    out = np.full((x.shape[0], k), 0.5)
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    proj = (x - mean) @ comps.T
    for c in range(len(s)):
        if s[c] <= tol or s[c] == 0.0:
            continue
        lo, hi = proj[:, c].min(), proj[:, c].max()
        if hi > lo:
            out[:, c] = (proj[:, c] - lo) / (hi - lo)
    return out

"""Synthetic multi-object shapes scenes and dataset loading."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError

SHAPES = ("circle", "square", "triangle")
DEFAULT_PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
)
MAX_TRIES = 1000
_SPLIT_CODES = {"train": 0, "eval": 1}


@dataclass
class SceneSpec:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    shapes: tuple = SHAPES
    min_size: int = 14
    max_size: int = 24
    palette: tuple = DEFAULT_PALETTE
    overlap: str = "disjoint"
    margin: int = 1
    background: tuple = (40, 40, 40)
    seed: int = 0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.palette = tuple(tuple(int(v) for v in c) for c in self.palette)
        self.background = tuple(int(v) for v in self.background)
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError(f"empty object count range [{self.min_objects}, {self.max_objects}]")
        if unknown := set(self.shapes) - set(SHAPES):
            raise ConfigurationError(f"unknown shapes {sorted(unknown)}")
        if len(self.palette) < self.max_objects:
            raise ConfigurationError("palette needs at least max_objects colours")
        if self.overlap not in ("disjoint", "any"):
            raise ConfigurationError(f"unknown overlap policy {self.overlap!r}")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ConfigurationError("invalid object size range")

    def check_patch_size(self, patch_size):
        if self.image_size % patch_size:
            raise ConfigurationError(f"image size {self.image_size} not divisible by patch size {patch_size}")

    def digest(self):
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def shape_mask(shape, cx, cy, size, image_size):
    """Boolean ``image_size x image_size`` mask of a shape centred at ``(cx, cy)``."""
    ys, xs = np.mgrid[0:image_size, 0:image_size] + 0.5
    r = size / 2.0
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upward triangle with apex (cx, cy - r) and base at y = cy + r
    return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) * 0.5)


def _dilate(mask, radius):
    if radius <= 0:
        return mask
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    return (F.max_pool2d(t, 2 * radius + 1, stride=1, padding=radius)[0, 0] > 0).numpy()


@dataclass
class Scene:
    image: np.ndarray  # uint8 H x W x 3
    instances: np.ndarray  # uint16 H x W, 0 = background
    class_ids: list  # shape class index of instance i + 1
    requested: int
    placed: int = field(default=0)


def render_scene(spec, rng):
    S = spec.image_size
    requested = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    colors = rng.choice(len(spec.palette), size=requested, replace=False)
    image = np.empty((S, S, 3), dtype=np.uint8)
    image[:] = spec.background
    instances = np.zeros((S, S), dtype=np.uint16)
    occupied = np.zeros((S, S), dtype=bool)
    class_ids = []
    for obj in range(requested):
        shape_idx = int(rng.integers(len(spec.shapes)))
        shape = spec.shapes[shape_idx]
        for _ in range(MAX_TRIES):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            cx = rng.uniform(size / 2, S - size / 2)
            cy = rng.uniform(size / 2, S - size / 2)
            mask = shape_mask(shape, cx, cy, size, S)
            if not mask.any():
                continue
            if spec.overlap == "any" or not (_dilate(mask, spec.margin) & occupied).any():
                break
        else:
            continue
        instances[mask] = len(class_ids) + 1
        image[mask] = spec.palette[colors[obj]]
        occupied |= mask
        class_ids.append(SHAPES.index(shape))
    if spec.overlap == "any":
        # relabel to consecutive ids in case later objects fully covered earlier ones
        present = [i for i in range(1, len(class_ids) + 1) if (instances == i).any()]
        remap = np.zeros(len(class_ids) + 1, dtype=np.uint16)
        remap[present] = np.arange(1, len(present) + 1)
        instances = remap[instances]
        class_ids = [class_ids[i - 1] for i in present]
    return Scene(image, instances, class_ids, requested, len(class_ids))


def generate_shapes_dataset(spec, n_train, n_eval, out_dir):
    """Render both splits to ``out_dir`` and write one manifest per split.

    Returns ``{split: manifest path}``.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifests = {}
    for split, count in (("train", n_train), ("eval", n_eval)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        lines = [f"# mufasa-shapes spec_hash={spec.digest()} split={split} count={count}"]
        records = []
        for idx in range(count):
            rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], idx])
            scene = render_scene(spec, rng)
            image_id = f"{idx:05d}"
            img_rel = f"{split}/{image_id}.png"
            inst_rel = f"{split}/{image_id}_inst.png"
            Image.fromarray(scene.image, mode="RGB").save(os.path.join(out_dir, img_rel))
            Image.fromarray(scene.instances.astype(np.uint16)).save(os.path.join(out_dir, inst_rel))
            if scene.placed < scene.requested:
                lines.append(f"# reduced {image_id} {scene.requested}->{scene.placed}")
            ids = ",".join(str(c) for c in scene.class_ids)
            records.append(f"{image_id}, {img_rel}, {inst_rel}, class_ids={ids}")
        path = os.path.join(out_dir, f"{split}.manifest")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines + records) + "\n")
        manifests[split] = path
    return manifests


@dataclass
class ManifestRecord:
    image_id: str
    image_path: str
    instance_path: str
    class_ids: list


def read_manifest(root, split):
    """Returns ``(spec_hash, records)``."""
    path = os.path.join(root, f"{split}.manifest")
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    spec_hash, records = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("spec_hash="):
                        spec_hash = tok.split("=", 1)[1]
                continue
            image_id, img, inst, cls = (part.strip() for part in line.split(",", 3))
            ids = cls.split("=", 1)[1]
            records.append(ManifestRecord(image_id, img, inst, [int(c) for c in ids.split(",") if c]))
    return spec_hash, records


class Sample(NamedTuple):
    image: np.ndarray  # float32 H x W x 3 in [0, 1]
    instances: np.ndarray  # int64, 0 = background
    classes: np.ndarray  # int64, 0 = background, shape class + 1 otherwise
    image_id: str


def _read_png(root, rel):
    path = os.path.join(root, rel)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file missing: {path}")
    with Image.open(path) as im:
        return np.array(im)


def load_sample(root, record):
    image = _read_png(root, record.image_path).astype(np.float32) / 255.0
    instances = _read_png(root, record.instance_path).astype(np.int64)
    lut = np.array([0] + [c + 1 for c in record.class_ids], dtype=np.int64)
    return Sample(image, instances, lut[instances], record.image_id)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def load_dataset(path, split, seed=None, epoch=0):
    """Iterate samples in manifest order, or shuffled under ``(seed, epoch)`` if a seed is given."""
    _, records = read_manifest(path, split)
    order = range(len(records)) if seed is None else epoch_order(len(records), seed, epoch)
    for i in order:
        yield load_sample(path, records[i])


@dataclass
class SplitData:
    """A whole split held in memory."""

    images: np.ndarray  # [n, H, W, 3] float32
    instances: np.ndarray  # [n, H, W] int64
    classes: np.ndarray  # [n, H, W] int64
    ids: list
    spec_hash: str = None

    def __len__(self):
        return len(self.ids)

    def subset(self, count):
        if not count or count >= len(self):
            return self
        return SplitData(self.images[:count], self.instances[:count], self.classes[:count], self.ids[:count], self.spec_hash)


def load_split(path, split):
    spec_hash, records = read_manifest(path, split)
    samples = [load_sample(path, r) for r in records]
    if not samples:
        raise ConfigurationError(f"split {split!r} in {path} is empty")
    return SplitData(
        np.stack([s.image for s in samples]),
        np.stack([s.instances for s in samples]),
        np.stack([s.classes for s in samples]),
        [s.image_id for s in samples],
        spec_hash,
    )


def preprocess(image, mode, target, maps=(), crop=None, flip=True, rng=None):
    """Resize the minor axis to ``target``, crop and (in train mode) randomly flip.

    ``crop`` is ``"random"`` (train default), ``"center"`` (eval default) or ``"full"``.
    Label maps in ``maps`` follow the same geometry with nearest-neighbour resampling.
    Returns ``(image, maps)``.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown preprocess mode {mode!r}")
    crop = crop or ("random" if mode == "train" else "center")
    if crop not in ("random", "center", "full"):
        raise ConfigurationError(f"unknown crop strategy {crop!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    image = np.asarray(image)
    maps = [np.asarray(m) for m in maps]
    H, W = image.shape[:2]
    if min(H, W) != target:
        scale = target / min(H, W)
        size = (max(target, round(H * scale)), max(target, round(W * scale)))
        t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)[None]
        image = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
        maps = [
            F.interpolate(torch.from_numpy(m.astype(np.float64))[None, None], size=size, mode="nearest")[0, 0]
            .numpy().astype(m.dtype)
            for m in maps
        ]
        H, W = size
    if crop != "full":
        if target > H or target > W:
            raise ConfigurationError(f"crop {target} larger than image {H}x{W}")
        if crop == "random":
            top = int(rng.integers(0, H - target + 1))
            left = int(rng.integers(0, W - target + 1))
        else:
            top, left = (H - target) // 2, (W - target) // 2
        image = image[top:top + target, left:left + target]
        maps = [m[top:top + target, left:left + target] for m in maps]
    if mode == "train" and flip and rng.random() < 0.5:
        image = image[:, ::-1]
        maps = [m[:, ::-1] for m in maps]
    return np.ascontiguousarray(image), [np.ascontiguousarray(m) for m in maps]

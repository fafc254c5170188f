import hashlib
import os

import numpy as np
import pytest
from PIL import Image

from mufasa.data import (
    SceneSpec, generate_shapes_dataset, load_dataset, load_split, preprocess, read_manifest, render_scene,
)
from mufasa.errors import ConfigurationError


def _digest_tree(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            with open(os.path.join(dirpath, name), "rb") as fh:
                h.update(name.encode() + fh.read())
    return h.hexdigest()


def test_single_circle_scene():
    spec = SceneSpec(min_objects=1, max_objects=1, shapes=("circle",))
    scene = render_scene(spec, np.random.default_rng(0))
    assert sorted(np.unique(scene.instances).tolist()) == [0, 1]
    assert scene.class_ids == [0]


def test_generation_is_deterministic(tmp_path):
    spec = SceneSpec(seed=3)
    generate_shapes_dataset(spec, 6, 3, tmp_path / "a")
    generate_shapes_dataset(spec, 6, 3, tmp_path / "b")
    assert _digest_tree(tmp_path / "a") == _digest_tree(tmp_path / "b")


def test_disjoint_objects_never_overlap():
    spec = SceneSpec(seed=1)
    for i in range(100):
        scene = render_scene(spec, np.random.default_rng([1, i]))
        ids = [k for k in np.unique(scene.instances) if k]
        # an overlapping later object would erase every pixel of an earlier one
        areas = [(scene.instances == k).sum() for k in ids]
        assert all(a > 0 for a in areas)
        assert ids == list(range(1, len(ids) + 1))


def test_disjoint_masks_pairwise_empty():
    spec = SceneSpec(seed=2, min_objects=4, max_objects=4)
    for i in range(100):
        scene = render_scene(spec, np.random.default_rng([2, i]))
        masks = [scene.instances == k for k in range(1, scene.placed + 1)]
        for a in range(len(masks)):
            for b in range(a + 1, len(masks)):
                assert not (masks[a] & masks[b]).any()


def test_placement_failure_reduces_count(tmp_path):
    spec = SceneSpec(image_size=16, min_objects=4, max_objects=4, min_size=12, max_size=14, margin=1)
    generate_shapes_dataset(spec, 3, 1, tmp_path)
    text = (tmp_path / "train.manifest").read_text()
    assert "# reduced" in text
    _, records = read_manifest(tmp_path, "train")
    assert len(records) == 3


def test_manifest_format_and_maps(tmp_path):
    generate_shapes_dataset(SceneSpec(seed=4), 5, 2, tmp_path)
    lines = (tmp_path / "train.manifest").read_text().splitlines()
    assert lines[0].startswith("# mufasa-shapes spec_hash=")
    record = [l for l in lines if not l.startswith("#")][0]
    assert record.startswith("00000, train/00000.png, train/00000_inst.png, class_ids=")
    inst = np.array(Image.open(tmp_path / "train/00000_inst.png"))
    assert inst.dtype == np.uint16
    ids = np.unique(inst)
    assert ids.tolist() == list(range(len(ids)))


def test_load_dataset_order_and_count(tmp_path):
    generate_shapes_dataset(SceneSpec(seed=5), 8, 2, tmp_path)
    plain = [s.image_id for s in load_dataset(tmp_path, "train")]
    assert plain == [f"{i:05d}" for i in range(8)]
    a = [s.image_id for s in load_dataset(tmp_path, "train", seed=1, epoch=0)]
    b = [s.image_id for s in load_dataset(tmp_path, "train", seed=1, epoch=0)]
    c = [s.image_id for s in load_dataset(tmp_path, "train", seed=1, epoch=1)]
    assert a == b and sorted(a) == plain and a != c


def test_gt_aligned_with_pixels(tmp_path):
    spec = SceneSpec(seed=6)
    generate_shapes_dataset(spec, 4, 1, tmp_path)
    bg = np.array(spec.background) / 255.0
    for sample in load_dataset(tmp_path, "train"):
        fg = sample.instances > 0
        assert np.allclose(sample.image[~fg], bg)
        for k in np.unique(sample.instances[fg]):
            ys, xs = np.nonzero(sample.instances == k)
            cy, cx = int(round(ys.mean())), int(round(xs.mean()))
            # centroid of a convex shape lies inside it and carries the object's colour
            assert sample.instances[cy, cx] == k
            assert not np.allclose(sample.image[cy, cx], bg)
        assert ((sample.classes > 0) == fg).all()


def test_missing_file_is_named(tmp_path):
    generate_shapes_dataset(SceneSpec(), 2, 1, tmp_path)
    os.remove(tmp_path / "train/00001.png")
    with pytest.raises(FileNotFoundError, match="00001.png"):
        list(load_dataset(tmp_path, "train"))
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path / "nowhere", "train")


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SceneSpec(min_objects=3, max_objects=2)
    with pytest.raises(ConfigurationError):
        SceneSpec(shapes=("hexagon",))
    with pytest.raises(ConfigurationError):
        SceneSpec(image_size=60).check_patch_size(8)


def test_preprocess_eval_is_deterministic():
    img = np.random.default_rng(0).random((40, 30, 3)).astype(np.float32)
    a, _ = preprocess(img, "eval", 24)
    b, _ = preprocess(img, "eval", 24)
    assert np.array_equal(a, b) and a.shape == (24, 24, 3)


def test_preprocess_identity_when_sizes_match():
    img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    out, _ = preprocess(img, "eval", 16)
    assert np.array_equal(out, img)
    out, _ = preprocess(img, "train", 16, crop="full", flip=False)
    assert np.array_equal(out, img)


def test_flip_is_consistent_and_involutive():
    img = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
    gt = np.arange(256).reshape(16, 16)
    seed = next(s for s in range(100) if np.random.default_rng(s).random() < 0.5)
    out, (m,) = preprocess(img, "train", 16, maps=[gt], crop="full", rng=np.random.default_rng(seed))
    assert np.array_equal(out, img[:, ::-1]) and np.array_equal(m, gt[:, ::-1])
    back, (m2,) = preprocess(out, "train", 16, maps=[m], crop="full", rng=np.random.default_rng(seed))
    assert np.array_equal(back, img) and np.array_equal(m2, gt)


def test_transforms_commute_with_label_maps():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, (20, 28))
    for mode, crop in (("eval", "center"), ("train", "random")):
        out, (m,) = preprocess(labels[..., None].repeat(3, -1).astype(np.float32), mode, 20, maps=[labels],
                               crop=crop, rng=np.random.default_rng(7))
        assert np.array_equal(out[..., 0].astype(np.int64), m)


def test_preprocess_rejects_unknown_modes():
    with pytest.raises(ConfigurationError):
        preprocess(np.zeros((8, 8, 3)), "test", 8)
    with pytest.raises(ConfigurationError):
        preprocess(np.zeros((8, 8, 3)), "eval", 8, crop="corner")


def test_preprocess_resizes_minor_axis():
    img = np.random.default_rng(4).random((20, 40, 3)).astype(np.float32)
    out, (m,) = preprocess(img, "eval", 10, maps=[np.ones((20, 40), np.int64)], crop="full")
    assert out.shape == (10, 20, 3) and m.shape == (10, 20) and m.dtype == np.int64

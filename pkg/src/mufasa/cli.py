"""Command-line entry point: ``mufasa <command> [options]``.

Commands::

    gen-data       render the synthetic shapes dataset
    dump-features  write MUFE feature files for a split
    train          single-phase training (``--self-distill`` for teacher + student)
    eval           score a checkpoint, writes report.txt / report.json
    export-masks   colour-indexed PNG label maps per image and mask source
    viz-pca        RGB PNG of the top-3 principal components of one layer per image

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

import argparse
import dataclasses
import datetime
import hashlib
import json
import logging
import os
import sys

import numpy as np
import torch
from PIL import Image

from .checkpoint import Checkpoint
from .config import (
    DataGenConfig, TrainConfig, config_hash, from_ini_text, load_config, replace, to_ini_text,
)
from .data import generate_shapes_dataset, load_split
from .errors import MufasaError
from .evaluate import evaluate_model, predict_masks
from .features import FeatureExtractor, FeatureStack, pca_project, write_feature_file
from .metrics import label_map_from_attention
from .training import load_model, train_self_distilled, train_single_phase

log = logging.getLogger("mufasa")

# fixed 16-colour palette for exported label maps, index 0 first
LABEL_PALETTE = (
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _git_blob_hash(text):
    raw = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(out_dir, command, config_path, config_text, started):
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config_text,
        "config_hash": _git_blob_hash(config_text),
        "out": out_dir,
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_config(args):
    config = load_config(TrainConfig, args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "data", None):
        changes["data_path"] = args.data
    return replace(config, **changes) if changes else config


def _checkpoint_config(ckpt, args):
    config = from_ini_text(TrainConfig, ckpt.config_text)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _split(args, config):
    data = load_split(args.data or config.data_path, args.split or config.eval_split)
    return data.subset(args.limit)


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(args):
    config = load_config(DataGenConfig, args.config) if args.config else DataGenConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, scene=dataclasses.replace(config.scene, seed=args.seed))
    generate_shapes_dataset(config.scene, config.n_train, config.n_eval, args.out)
    log.info("wrote %d train / %d eval scenes to %s", config.n_train, config.n_eval, args.out)
    return to_ini_text(config)


def cmd_dump_features(args):
    config = _train_config(args)
    data = _split(args, config)
    extractor = FeatureExtractor(config.backend)
    layer_ids = list(args.layers or config.layer_ids)
    grid = extractor.grid(*data.images.shape[1:3])
    for start in range(0, len(data), config.batch_size):
        ids = data.ids[start:start + config.batch_size]
        feats = extractor(torch.from_numpy(data.images[start:start + len(ids)]), layer_ids, ids=ids)
        for image_id, f in zip(ids, feats):
            write_feature_file(os.path.join(args.out, f"{image_id}.mufe"), FeatureStack(f.numpy(), layer_ids, grid))
    log.info("wrote %d feature files to %s", len(data), args.out)
    return to_ini_text(config)


def cmd_train(args):
    config = _train_config(args)
    run = train_self_distilled if args.self_distill else train_single_phase
    ckpt = run(config, out_dir=args.out, max_steps=args.max_steps)
    log.info("finished at step %d; checkpoints in %s", ckpt.step, args.out)
    return to_ini_text(config)


def cmd_eval(args):
    ckpt = Checkpoint.load(args.ckpt)
    config = _checkpoint_config(ckpt, args)
    ckpt.config_text, ckpt.config_hash = to_ini_text(config), config_hash(config)
    data = _split(args, config)
    res = (args.eval_res, args.eval_res) if args.eval_res else None
    report = evaluate_model(ckpt, data, eval_res=res)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    sys.stdout.write(report.to_text())
    return ckpt.config_text


def cmd_export_masks(args):
    ckpt = Checkpoint.load(args.ckpt)
    config = _checkpoint_config(ckpt, args)
    data = _split(args, config)
    _, model = load_model(ckpt)
    extractor = FeatureExtractor(config.backend)
    grid = tuple(ckpt.extra["grid"])
    slot, dec = predict_masks(
        model, extractor, data, config.layer_ids, seed=config.seed,
        batch_size=config.batch_size, dtype=getattr(torch, config.dtype),
    )
    size = tuple(data.images.shape[1:3])
    palette = [v for rgb in LABEL_PALETTE for v in rgb]
    for source, masks in (("slot", slot), ("decoder", dec)):
        os.makedirs(os.path.join(args.out, source), exist_ok=True)
        for image_id, mask in zip(data.ids, masks):
            labels = label_map_from_attention(mask, grid, size) % len(LABEL_PALETTE)
            im = Image.fromarray(labels.astype(np.uint8), mode="P")
            im.putpalette(palette)
            im.save(os.path.join(args.out, source, f"{image_id}.png"))
    log.info("exported %d x 2 label maps to %s", len(data), args.out)
    return to_ini_text(config)


def cmd_viz_pca(args):
    config = _train_config(args)
    data = _split(args, config)
    extractor = FeatureExtractor(config.backend)
    gh, gw = extractor.grid(*data.images.shape[1:3])
    for start in range(0, len(data), config.batch_size):
        ids = data.ids[start:start + config.batch_size]
        feats = extractor(torch.from_numpy(data.images[start:start + len(ids)]), [args.layer], ids=ids)
        for image_id, f in zip(ids, feats[:, 0]):
            rgb = (pca_project(f.double().numpy(), k=3) * 255).round().astype(np.uint8)
            im = Image.fromarray(rgb.reshape(gh, gw, 3), mode="RGB")
            if args.upscale > 1:
                im = im.resize((gw * args.upscale, gh * args.upscale), Image.NEAREST)
            im.save(os.path.join(args.out, f"{image_id}.png"))
    log.info("wrote %d PCA images to %s", len(data), args.out)
    return to_ini_text(config)


# -- parser -----------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="mufasa", description="Multi-layer slot-attention object discovery toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")

    def split_args(p):
        p.add_argument("--data", default=None, help="dataset root (defaults to the configured one)")
        p.add_argument("--split", default=None, help="split name (defaults to the eval split)")
        p.add_argument("--limit", type=int, default=0, help="use only the first N images")

    p = sub.add_parser("gen-data", help="render the shapes dataset")
    common(p, config_required=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("dump-features", help="write feature files for a split")
    common(p)
    split_args(p)
    p.add_argument("--layers", type=lambda s: [int(t) for t in s.split(",")], default=None,
                   help="comma separated layer ids (default: the configured ones)")
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", default=None, help="dataset root (defaults to the configured one)")
    p.add_argument("--self-distill", action="store_true", help="teacher phase followed by a distilled student")
    p.add_argument("--max-steps", type=int, default=None, help="stop each phase after this many steps")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("export-masks", cmd_export_masks, "export predicted label maps"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=True, help="checkpoint file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the slot-initialisation seed")
        split_args(p)
        if name == "eval":
            p.add_argument("--eval-res", type=int, default=0, help="square evaluation resolution")
        p.set_defaults(func=func)

    p = sub.add_parser("viz-pca", help="PCA visualisation of one feature layer")
    common(p)
    split_args(p)
    p.add_argument("--layer", type=int, required=True, help="layer id")
    p.add_argument("--upscale", type=int, default=1, help="nearest-neighbour upscaling factor")
    p.set_defaults(func=cmd_viz_pca)
    return parser


def run_command(argv=None):
    """Run one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    threads = os.environ.get("MUFASA_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    started = _now()
    try:
        os.makedirs(args.out, exist_ok=True)
        config_text = args.func(args)
        write_run_manifest(args.out, args.command, getattr(args, "config", None) or getattr(args, "ckpt", None),
                           config_text, started)
    except (MufasaError, OSError, ValueError, KeyError) as exc:
        print(f"mufasa {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()

"""Command-line entry point: ``rndf {train,eval,visualize,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
import argparse
import logging
import os
import sys
from dataclasses import asdict, replace
from typing import Optional, Tuple

import numpy as np

from . import config as C
from . import gradcheck, persist, saliency
from .backbone import BackboneConfig
from .data import (ArrayDataset, ImageDataset, PreprocessConfig, compute_channel_stats, load_image,
                   load_manifest, load_vector_csv, preprocess, synth_split)
from .model import RNDF
from .trainer import Trainer, evaluate

logger = logging.getLogger("rndf")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


# ---------------------------------------------------------------------------
# data wiring
# ---------------------------------------------------------------------------

def _image_meta(cfg: PreprocessConfig) -> dict:
    meta = asdict(replace(cfg, train_mode=False))
    for key in ("channel_mean", "channel_std"):
        if meta[key] is not None:
            meta[key] = list(meta[key])
    meta["kind"] = "image"
    return meta


def _meta_preprocess(meta: Optional[dict]) -> Optional[PreprocessConfig]:
    if not meta or meta.get("kind") != "image":
        return None
    fields = {k: v for k, v in meta.items() if k != "kind"}
    for key in ("channel_mean", "channel_std"):
        if fields.get(key) is not None:
            fields[key] = tuple(fields[key])
    return PreprocessConfig(**fields)


def load_datasets(cfg: C.RunConfig) -> Tuple[object, Optional[object], Optional[object]]:
    """``(train, val, test)`` for the configured source.

    The synthetic source has a held-out test split but no validation split;
    the test split is never used during training.
    """
    d = cfg.data
    if d.source == "synthetic":
        train, test = synth_split(d.n_train, d.n_test, d.input_dim, d.noise_std, d.seed)
        return train, None, test
    if d.source == "csv":
        train = load_vector_csv(d.csv)
        val = load_vector_csv(d.val_csv) if d.val_csv else None
        return train, val, None
    pre = cfg.preprocess
    train = ImageDataset(load_manifest(d.manifest, d.root), pre)
    if len(train) == 0:
        raise ValueError(f"manifest {d.manifest} is empty")
    if pre.channel_mean is None or pre.channel_std is None:
        mean, std = compute_channel_stats(train)
        pre = replace(pre, channel_mean=mean, channel_std=std)
        train.cfg = pre
    val = None
    if d.val_manifest:
        val = ImageDataset(load_manifest(d.val_manifest, d.val_root), replace(pre, train_mode=False))
    return train, val, None


def build_model(cfg: C.RunConfig, train) -> RNDF:
    fcfg = cfg.forest
    b = cfg.backbone
    if isinstance(train, ImageDataset):
        shape = tuple(train.input_shape)
        p = b.pool or 1
        input_dim = shape[0] * (shape[1] // p) * (shape[2] // p)
        meta = _image_meta(train.cfg)
    else:
        shape = None
        input_dim = int(np.prod(train.input_shape))
        meta = {"kind": "vector"}
    if shape is None and b.pool is not None:
        raise C.ConfigError("backbone.pool", "pooling needs image inputs")
    bcfg = BackboneConfig(input_dim, fcfg.num_split_outputs, embed_dim=b.embed_dim,
                          num_blocks=b.num_blocks, hidden_dim=b.hidden_dim, head_dim=b.head_dim,
                          pool=b.pool, image_shape=shape, seed=b.seed)
    return RNDF.create(bcfg, fcfg, train.labels, seed=b.seed, preprocess=meta)


def dataset_for_checkpoint(model: RNDF, args, split: str):
    """Evaluation data for ``eval``/``visualize`` from the command-line flags."""
    if getattr(args, "manifest", None):
        pre = _meta_preprocess(model.preprocess)
        if pre is None:
            raise ValueError("checkpoint was not trained on images; use --csv")
        manifest = load_manifest(args.manifest, args.root)
        return ImageDataset(manifest, replace(pre, train_mode=False))
    if getattr(args, "csv", None):
        return load_vector_csv(args.csv)
    if args.config is None and not args.set:
        raise C.ConfigError("data", "give --manifest, --csv or --config")
    cfg = C.load(args.config, args.set)
    if cfg.data.source == "manifest":
        pre = _meta_preprocess(model.preprocess) or cfg.preprocess
        path, root = ((cfg.data.val_manifest, cfg.data.val_root) if split != "train"
                      else (cfg.data.manifest, cfg.data.root))
        if not path:
            raise C.ConfigError("data.val_manifest", f"no manifest for split {split!r}")
        return ImageDataset(load_manifest(path, root), replace(pre, train_mode=False))
    train, val, test = load_datasets(cfg)
    chosen = {"train": train, "val": val, "test": test}[split]
    if chosen is None:
        raise C.ConfigError("data", f"the configured source has no {split!r} split")
    return chosen


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _overrides(args):
    items = list(args.set or [])
    if getattr(args, "out", None):
        items.append(f"out={args.out}")
    if getattr(args, "seed", None) is not None:
        items += [f"seed={args.seed}", f"train.seed={args.seed}", f"backbone.seed={args.seed}"]
    return items


def cmd_train(args) -> int:
    cfg = C.load(args.config, _overrides(args))
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(C.dump(cfg))
    train, val, test = load_datasets(cfg)
    model = build_model(cfg, train)
    trainer = Trainer(model, cfg.train)
    best_path = os.path.join(cfg.out, "best.ckpt")

    def checkpoint(tr, is_best):
        if is_best:
            persist.save(tr.model, best_path)

    trainer.fit(train, val, log_path=os.path.join(cfg.out, "metrics.csv"), checkpoint_fn=checkpoint)
    persist.save(model, os.path.join(cfg.out, "final.ckpt"))
    for name, data in (("val", val), ("test", test)):
        if data is not None:
            mae, cs = evaluate(model, data, cfg.train.cs_threshold)
            print(f"{name} MAE {mae:.4f} CS {cs:.4f}")
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = persist.load(args.checkpoint)
    data = dataset_for_checkpoint(model, args, args.split)
    mae, cs = evaluate(model, data, args.threshold)
    print(f"MAE {mae:.6f}")
    print(f"CS@{args.threshold:g} {cs:.6f}")
    print(f"N {len(data)}")
    return EXIT_OK


def _visualize_input(model: RNDF, args):
    if args.input is not None and args.input.lower().endswith(IMAGE_SUFFIXES):
        pre = _meta_preprocess(model.preprocess)
        if pre is None:
            raise ValueError("checkpoint was not trained on images")
        return preprocess(load_image(args.input), pre, train=False), args.label
    if args.input is not None:
        data = load_vector_csv(args.input)
    else:
        data = dataset_for_checkpoint(model, args, args.split)
    if not 0 <= args.row < len(data):
        raise IndexError(f"row {args.row} out of range for {len(data)} samples")
    x, y = data.batch([args.row], train=False)
    label = args.label if args.label is not None else float(y[0, 0])
    return x[0], label


def cmd_visualize(args) -> int:
    model = persist.load(args.checkpoint)
    x, label = _visualize_input(model, args)
    result = saliency.trace_dsm_sequence(model, x, ground_truth=label)
    paths = saliency.export_maps(result, args.out)
    gt = "n/a" if result.ground_truth is None else f"{result.ground_truth[0]:.2f}"
    print(f"tree {result.tree} leaf {result.leaf} path weight {result.path_weight:.6g}")
    print(f"(Pred, GT) = ({result.prediction[0]:.2f}, {gt})")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed
    if seed is None and args.config:
        cfg = C.load(args.config, args.set, require_data=False)
        seed = cfg.train.seed
    results = gradcheck.run_all(seed or 0, corrupt=args.corrupt)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p, out_help="output directory"):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", help=out_help)
    p.add_argument("--seed", type=int, help="seed for training and initialization")


def _data_flags(p):
    p.add_argument("--manifest", help="image manifest (path,label)")
    p.add_argument("--root", help="image root directory (default: the manifest's directory)")
    p.add_argument("--csv", help="vector CSV (features..., label)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="split of the --config data source (default: test)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rndf", description="Residual neural decision forest regression.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p, "output directory (overrides 'out')")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (MAE and CS)")
    p.add_argument("checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--threshold", type=float, default=5.0, help="CS threshold (default 5)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="decision saliency maps along the heaviest path")
    p.add_argument("checkpoint")
    p.add_argument("input", nargs="?", help="PGM/PPM image or vector CSV")
    _common(p, "directory for the maps and trace.json")
    _data_flags(p)
    p.add_argument("--row", type=int, default=0, help="sample index for CSV / config data")
    p.add_argument("--label", type=float, help="ground-truth label to record")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference self-checks")
    _common(p)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "visualize" and not args.out:
        parser.error("visualize needs --out")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, IndexError, FloatingPointError, persist.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

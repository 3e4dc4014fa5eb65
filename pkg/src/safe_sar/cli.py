"""Command-line entry point: ``safe <subcommand> ...``.

Values resolve as command-line flag > ``--set key=value`` > ``--config``
file > built-in default. Exit codes: 0 success, 1 usage error, 2 data or
format error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config, parse_int_list
from .container import ContainerError, read_tensor, write_tensor
from .datasets import (
    load_image,
    load_patch_dataset,
    load_segmentation_dataset,
    synth_patches,
    synth_segmentation_scenes,
    write_patch_dataset,
    write_segmentation_dataset,
)
from .detection import detect_pattern
from .model import load_feature_extractor
from .pretrain import NonFiniteLossError, pretrain
from .probe import FeatureMatrix, FewShotError, extract_features, feature_map, fewshot_eval, reduce_to_rgb
from .sar import make_despeckler, parse_scene_spec, synthesize_scene
from .seeding import SeedStream
from .segmentation import (
    SegTrainConfig,
    confusion_matrix,
    load_head,
    save_head,
    seg_metrics,
    seg_predict,
    seg_train,
    stack_multiscale,
)

log = logging.getLogger("safe_sar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# flag dest -> config key, per subcommand
FLAG_KEYS = {
    "pretrain": {"epochs": "train.epochs", "batch_size": "train.batch_size", "max_steps": "train.max_steps",
                 "lr": "train.lr"},
    "extract": {"branch": "probe.branch", "feature": "probe.feature"},
    "classify": {"method": "probe.method", "labels_per_class": "probe.labels_per_class", "trials": "probe.trials",
                 "k": "probe.k", "branch": "probe.branch", "feature": "probe.feature"},
    "segment-train": {"epochs": "seg.epochs", "lr": "seg.lr", "patch_sizes": "seg.patch_sizes",
                      "stride": "seg.stride", "val_fraction": "seg.val_fraction"},
    "segment-eval": {},
    "detect": {"threshold": "detect.threshold", "patch": "detect.patch", "stride": "detect.stride"},
    "visualize": {"patch": "visualize.patch", "stride": "visualize.stride", "reducer": "visualize.reducer",
                  "reducer_command": "visualize.command"},
    "synth": {"despeckle_window": "data.despeckle_window"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safe", description="Self-supervised SAR feature extraction and its evaluations.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        return p

    p = add("pretrain", "self-supervised pretraining on a patch dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)

    p = add("extract", "encode patches into a feature matrix")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="patch dataset directory or (N,H,W[,c]) container")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--branch", choices=("teacher", "student"))
    p.add_argument("--feature", choices=("z", "h", "s"))

    p = add("classify", "few-shot k-NN or linear-probe classification")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--train", type=Path, required=True, help="labelled patch dataset")
    p.add_argument("--test", type=Path, help="labelled query dataset (default: the unpicked training rows)")
    p.add_argument("--method", choices=("knn", "linear"))
    p.add_argument("--labels-per-class", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--branch", choices=("teacher", "student"))
    p.add_argument("--feature", choices=("z", "h", "s"))

    p = add("segment-train", "train the segmentation head on frozen features")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="segmentation dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patch-sizes")
    p.add_argument("--stride", type=int)
    p.add_argument("--val-fraction", type=float)

    p = add("segment-eval", "predict label maps and report metrics")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="uint8 prediction container")

    p = add("detect", "reference-patch pattern detection")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="float32 score grid; the mask goes to <stem>_mask.saft")
    p.add_argument("--threshold", type=float)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)

    p = add("visualize", "feature grid reduced to an RGB image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--reducer", choices=("pca", "external"))
    p.add_argument("--command", dest="reducer_command", help="external reducer command")

    p = add("synth", "synthetic SLC scenes and datasets")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--spec", type=Path, help="scene description file; writes one SLC container")
    mode.add_argument("--patches", type=int, metavar="N", help="patch dataset with N samples per class")
    mode.add_argument("--scenes", type=int, metavar="N", help="segmentation dataset with N scenes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, help="patch or scene side length")
    p.add_argument("--despeckle-window", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    try:
        cfg = cfg.with_overrides(overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS[args.command].items()
             if getattr(args, dest, None) is not None}
    if args.seed is not None:
        flags["seed"] = args.seed
    return cfg.with_overrides(flags)


def _apply_worker_cap() -> None:
    raw = os.environ.get("SAFE_NUM_WORKERS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise UsageError(f"SAFE_NUM_WORKERS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise UsageError("SAFE_NUM_WORKERS must be >= 1")
        torch.set_num_threads(min(n, torch.get_num_threads()))


def _load_patches(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalized patches and optional labels from a dataset dir or a single container."""
    if path.is_dir():
        ds = load_patch_dataset(path)
        return ds.normalized, ds.labels
    arr = read_tensor(path)
    if np.iscomplexobj(arr):
        raise ContainerError(f"{path}: expected normalized real patches, got complex samples")
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ContainerError(f"{path}: expected (N, H, W[, c]) patches, got shape {arr.shape}")
    return arr.astype(np.float32), None


def _extractor(cfg: RunConfig, checkpoint: Path):
    return load_feature_extractor(checkpoint, cfg["probe.branch"], cfg["probe.feature"])


def cmd_pretrain(args, cfg: RunConfig) -> None:
    final = pretrain(cfg, args.data, args.out, resume=args.resume)
    print(f"checkpoint={final}")


def cmd_extract(args, cfg: RunConfig) -> None:
    patches, _ = _load_patches(args.data)
    feats = extract_features(_extractor(cfg, args.checkpoint), patches)
    write_tensor(args.out, feats.astype(np.float32))
    print(f"features={args.out} shape={feats.shape}")


def cmd_classify(args, cfg: RunConfig) -> None:
    fx = _extractor(cfg, args.checkpoint)
    patches, labels = _load_patches(args.train)
    if labels is None:
        raise FewShotError(f"{args.train} has no labels")
    train = FeatureMatrix(extract_features(fx, patches), labels)
    query = None
    if args.test is not None:
        q_patches, q_labels = _load_patches(args.test)
        if q_labels is None:
            raise FewShotError(f"{args.test} has no labels")
        query = FeatureMatrix(extract_features(fx, q_patches), q_labels)
    report = fewshot_eval(
        train, cfg["probe.labels_per_class"], cfg["probe.trials"], cfg["probe.method"], seed=cfg["seed"],
        k=cfg["probe.k"], query=query, epochs=cfg["probe.epochs"], lr=cfg["probe.lr"],
    )
    print(report)


def cmd_segment_train(args, cfg: RunConfig) -> None:
    images, labels = load_segmentation_dataset(args.data)
    fx = _extractor(cfg, args.checkpoint)
    sizes, stride = parse_int_list(cfg["seg.patch_sizes"]), cfg["seg.stride"]
    feats = stack_multiscale(fx, images, sizes, stride)
    result = seg_train(feats, labels, cfg["seg.n_classes"], SegTrainConfig.from_config(cfg))
    save_head(args.out, result.head, sizes, stride)
    print(f"head={args.out}")
    for epoch, loss in enumerate(result.losses, 1):
        log.info("epoch %d loss %.6f", epoch, loss)
    if result.val_metrics is not None:
        print(result.val_metrics.as_text(), end="")


def cmd_segment_eval(args, cfg: RunConfig) -> None:
    images, labels = load_segmentation_dataset(args.data)
    head, sizes, stride = load_head(args.head)
    fx = _extractor(cfg, args.checkpoint)
    pred = seg_predict(head, stack_multiscale(fx, images, sizes, stride), labels.shape[1:])
    write_tensor(args.out, pred)
    n = head.arch["n_classes"]
    if labels.max() >= n:
        raise ContainerError(f"labels reach {labels.max()}, head predicts {n} classes")
    print(seg_metrics(confusion_matrix(pred, labels, n)).as_text(), end="")


def mask_path(out: Path) -> Path:
    return out.with_name(f"{out.stem}_mask{out.suffix or '.saft'}")


def cmd_detect(args, cfg: RunConfig) -> None:
    fx = _extractor(cfg, args.checkpoint)
    image, ref = load_image(args.image), load_image(args.ref)
    result = detect_pattern(image, ref, fx, cfg["detect.threshold"], cfg["detect.patch"], cfg["detect.stride"],
                            center=cfg["detect.center"])
    write_tensor(args.out, result.scores.astype(np.float32))
    write_tensor(mask_path(args.out), result.mask.astype(np.uint8))
    print(f"scores={args.out} mask={mask_path(args.out)} grid={result.scores.shape} "
          f"detections={int(result.mask.sum())} max_score={float(result.scores.max())!r}")


def cmd_visualize(args, cfg: RunConfig) -> None:
    fx = _extractor(cfg, args.checkpoint)
    grid = feature_map(fx, load_image(args.image), cfg["visualize.patch"], cfg["visualize.stride"])
    rgb = reduce_to_rgb(grid, cfg["visualize.reducer"], cfg["visualize.command"])
    write_tensor(args.out, rgb.astype(np.float32))
    print(f"rgb={args.out} grid={grid.shape}")


def cmd_synth(args, cfg: RunConfig) -> None:
    seed = SeedStream(cfg["seed"])
    if args.spec is not None:
        spec = parse_scene_spec(args.spec.read_text(encoding="utf-8"))
        slc, labels = synthesize_scene(spec, seed.child("scene"))
        write_tensor(args.out, slc.samples)
        label_out = args.out.with_name(f"{args.out.stem}_labels{args.out.suffix or '.saft'}")
        write_tensor(label_out, labels)
        print(f"slc={args.out} labels={label_out} shape={slc.samples.shape}")
        return
    despeckler = make_despeckler(cfg["data.despeckle_window"], cfg["data.despeckle_command"])
    low, high = cfg["data.norm_low_pct"], cfg["data.norm_high_pct"]
    if args.patches is not None:
        if args.patches < 1:
            raise UsageError("--patches must be >= 1")
        slc, labels = synth_patches(args.patches, seed.child("patches"), size=args.size or 100)
        write_patch_dataset(args.out, slc, despeckler, labels, low_pct=low, high_pct=high)
        print(f"dataset={args.out} samples={len(slc)}")
    else:
        if args.scenes < 1:
            raise UsageError("--scenes must be >= 1")
        slc, labels = synth_segmentation_scenes(args.scenes, seed.child("scenes"), size=args.size or 256)
        write_segmentation_dataset(args.out, slc, labels, low_pct=low, high_pct=high)
        print(f"dataset={args.out} scenes={len(slc)}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "classify": cmd_classify,
    "segment-train": cmd_segment_train,
    "segment-eval": cmd_segment_eval,
    "detect": cmd_detect,
    "visualize": cmd_visualize,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SAFE_LOG_LEVEL", "WARNING"), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        _apply_worker_cap()
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContainerError, ConfigError, FewShotError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

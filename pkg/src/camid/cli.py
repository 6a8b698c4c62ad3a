"""Command-line interface: ``camid <subcommand> [options]``.

Every subcommand writes its artifacts into ``--out`` (a directory) together
with a ``<subcommand>-summary.json`` file, and prints the seed it used.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cnn, pipeline, svm, synth
from .features import FeatureSet, read_features, write_features
from .imageio import ImageFormatError, decode_image, write_ppm

log = logging.getLogger("camid")

CHECKPOINT_NAME = "cnn.ckpt"
BATTERY_NAME = "battery.svm"


class CliError(Exception):
    pass


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _existing(path, what):
    if path is None:
        raise CliError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary(args, out: Path, **fields):
    summary = {"command": args.command, "seed": args.seed, **fields}
    path = out / f"{args.command}-summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    out = _outdir(args)
    exclude = []
    if args.exclude_from:
        exclude = [(p.kernel, p.cfa) for p in synth.load_profiles(_existing(args.exclude_from, "exclude-from"))]
    manifest = synth.make_dataset(args.models, args.instances, args.scenes, args.shots, out, seed=args.seed,
                                  size=(args.size, args.size), prefix=args.prefix, exclude=exclude,
                                  workers=args.workers)
    return _summary(args, out, images=len(manifest), models=manifest.labels,
                    manifest=str(out / "manifest.csv"), excluded=[list(e) for e in exclude])


def cmd_splice(args):
    out = _outdir(args)
    profiles = synth.load_profiles(_existing(args.profiles, "profiles"))
    names = [p.name for p in profiles]
    try:
        left, right = (profiles[names.index(n)] for n in (args.left, args.right))
    except ValueError as exc:
        raise CliError(f"unknown profile; available: {', '.join(names)}") from exc
    img = synth.make_splice(left, right, size=(args.size, args.size), seed=args.seed)
    write_ppm(out / "splice.ppm", img)
    return _summary(args, out, left=left.name, right=right.name, image=str(out / "splice.ppm"))


def cmd_split(args):
    out = _outdir(args)
    manifest = pipeline.Manifest.read(_existing(args.manifest, "manifest"))
    split = pipeline.split_dataset(manifest, pipeline.SplitSpec(args.eval_scenes, args.val_scenes, args.seed))
    for name, part in (("train", split.train), ("val", split.val), ("eval", split.eval)):
        part.write(out / f"{name}.csv")
    return _summary(args, out, train=len(split.train), val=len(split.val), eval=len(split.eval),
                    eval_scenes=split.eval_scenes, val_scenes=split.val_scenes, held_out=split.held_out,
                    labels=manifest.labels)


def cmd_train_cnn(args):
    out = _outdir(args)
    train_m = pipeline.Manifest.read(_existing(args.manifest, "manifest"))
    val_m = pipeline.Manifest.read(_existing(args.val_manifest, "val-manifest"), labels=train_m.labels)
    xt, yt, _ = pipeline.collect_patches(train_m, args.k)
    xv, yv, _ = pipeline.collect_patches(val_m, args.k)
    log.info("training on %d patches, validating on %d", len(xt), len(xv))
    config = cnn.TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed,
                             learning_rate=args.lr)
    model = cnn.build_network(len(train_m.labels), seed=args.seed, classes=train_m.labels)
    best, history = cnn.train(model, xt, yt, xv, yv, config)
    cnn.save_checkpoint(best, out / CHECKPOINT_NAME)
    cnn.write_log(history, out / "train-log.csv")
    if not args.no_figures:
        from . import plots
        plots.training_figure(history, out / "training.png")
    return _summary(args, out, checkpoint=str(out / CHECKPOINT_NAME), train_patches=len(xt),
                    val_patches=len(xv), best_epoch=best.meta["epoch"], val_loss=best.meta["val_loss"],
                    val_accuracy=best.meta["val_accuracy"], epochs=args.epochs)


def cmd_extract_features(args):
    out = _outdir(args)
    model = cnn.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    manifest = pipeline.Manifest.read(_existing(args.manifest, "manifest"))
    patches, labels, info = pipeline.collect_patches(manifest, args.k)
    feats = (cnn.extract_features(model, patches) if len(patches)
             else np.empty((0, cnn.FEATURE_DIM), np.float32))
    fs = FeatureSet(feats.astype(np.float32), labels, info[:, 0], info[:, 1], info[:, 2],
                    [r.path for r in manifest], manifest.labels)
    name = args.name or Path(args.manifest).stem
    path = out / f"{name}.feat"
    write_features(fs, path)
    return _summary(args, out, features=str(path), patches=len(fs), images=len(manifest))


def cmd_train_svm(args):
    out = _outdir(args)
    tr = read_features(_existing(args.features, "features"))
    va = read_features(_existing(args.val_features, "val-features"))
    if tr.classes != va.classes:
        raise CliError("training and validation feature files use different class tables")
    battery, results = svm.select_C(tr.features, tr.labels, va.features, va.labels, tr.classes, args.c_grid)
    svm.save_battery(battery, out / BATTERY_NAME)
    with open(out / "c-selection.csv", "w") as f:
        f.write("C,val_accuracy\n")
        for c, acc in results:
            f.write(f"{c!r},{acc!r}\n")
    return _summary(args, out, battery=str(out / BATTERY_NAME), C=battery.C, classifiers=len(battery),
                    selection=[{"C": c, "accuracy": a} for c, a in results])


def _load_models(args):
    model = cnn.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    battery = svm.load_battery(_existing(args.battery, "battery"))
    return model, battery


def cmd_classify(args):
    model, battery = _load_models(args)
    img = decode_image(_existing(args.image, "image"))
    res = pipeline.classify_image(img, model, battery, args.k)
    label = battery.classes[res.label] if res.classified else None
    print(f"label: {label if label is not None else 'UNCLASSIFIABLE'}")
    print("votes: " + " ".join(f"{c}={int(v)}" for c, v in zip(battery.classes, res.tally)))
    print(f"patches: {len(res.patch_labels)} (shortfall {res.shortfall})")
    fields = dict(image=str(args.image), label=label, patches=len(res.patch_labels), shortfall=res.shortfall,
                  votes={c: int(v) for c, v in zip(battery.classes, res.tally)},
                  patch_labels=[battery.classes[i] for i in res.patch_labels])
    if args.out:
        return _summary(args, _outdir(args), **fields)
    return {"command": args.command, "seed": args.seed, **fields}


def cmd_evaluate(args):
    out = _outdir(args)
    model, battery = _load_models(args)
    manifest = pipeline.Manifest.read(_existing(args.manifest, "manifest"), labels=battery.classes)
    preds = pipeline.predict_manifest(manifest, model, battery, args.k)
    cm = pipeline.confusion(preds, battery.classes, args.k, args.exclude_rejects)
    cm.write(out / "confusion.csv", out / "confusion-percent.csv")
    patch_total = sum(len(p.patch_labels) for p in preds)
    patch_ok = sum(int((p.patch_labels == p.true_label).sum()) for p in preds)
    patch_acc = patch_ok / patch_total if patch_total else float("nan")
    with open(out / "accuracy.csv", "w") as f:
        f.write("metric,value\n")
        f.write(f"image_accuracy,{cm.accuracy!r}\n")
        f.write(f"patch_accuracy,{patch_acc!r}\n")
        f.write(f"images,{cm.total}\n")
        f.write(f"rejected,{int(cm.rejects.sum())}\n")
    if not args.no_figures:
        from . import plots
        plots.confusion_figure(cm, out / "confusion.png", title=f"Confusion matrix, K={args.k}")
    return _summary(args, out, k=args.k, accuracy=cm.accuracy, patch_accuracy=patch_acc, images=cm.total,
                    rejected=int(cm.rejects.sum()), confusion=str(out / "confusion.csv"))


def cmd_curve(args):
    out = _outdir(args)
    model, battery = _load_models(args)
    manifest = pipeline.Manifest.read(_existing(args.manifest, "manifest"), labels=battery.classes)
    curve, _ = pipeline.accuracy_vs_patches(manifest, model, battery, args.k_list, args.exclude_rejects)
    pipeline.write_curve(curve, out / "curve.csv")
    if not args.no_figures:
        from . import plots
        plots.curve_figure(curve, out / "curve.png")
    return _summary(args, out, curve=[{"K": k, "accuracy": a} for k, a in curve])


def cmd_localize(args):
    out = _outdir(args)
    model, battery = _load_models(args)
    img = decode_image(_existing(args.image, "image"))
    grid = pipeline.localization_map(img, model, battery, args.block)
    pipeline.write_label_map(grid, battery.classes, out / "labels.pgm", out / "legend.csv")
    if not args.no_figures:
        from . import plots
        plots.label_map_figure(grid, battery.classes, out / "labels.png", image=img)
    counts = {battery.classes[i]: int((grid == i).sum()) for i in range(battery.num_classes)}
    return _summary(args, out, rows=grid.shape[0], cols=grid.shape[1], blocks=counts,
                    rejected=int((grid == pipeline.REJECT).sum()), map=str(out / "labels.pgm"))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--workers", type=_positive, default=1, help="worker processes; never changes results")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--checkpoint", help="CNN checkpoint file")
    models.add_argument("--battery", help="SVM battery file")

    figs = argparse.ArgumentParser(add_help=False)
    figs.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    p = argparse.ArgumentParser(prog="camid", description="Camera model attribution from image patches.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic multi-camera dataset")
    s.add_argument("--models", type=int, default=4)
    s.add_argument("--instances", type=int, default=2)
    s.add_argument("--scenes", type=int, default=12)
    s.add_argument("--shots", type=int, default=1)
    s.add_argument("--size", type=int, default=384, help="image side, multiple of 64")
    s.add_argument("--prefix", default="cam", help="model name prefix")
    s.add_argument("--exclude-from", help="profiles.json whose kernel/CFA combinations must not be reused")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("splice", parents=[common], help="half-and-half splice of two synthetic profiles")
    s.add_argument("--profiles", help="profiles.json written by synth")
    s.add_argument("--left", required=True)
    s.add_argument("--right", required=True)
    s.add_argument("--size", type=int, default=384)
    s.set_defaults(func=cmd_splice)

    s = sub.add_parser("split", parents=[common], help="scene/instance-disjoint train/val/eval split")
    s.add_argument("--manifest")
    s.add_argument("--eval-scenes", type=int, default=3)
    s.add_argument("--val-scenes", type=int, default=2)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-cnn", parents=[common, figs], help="train the CNN and keep the best epoch")
    s.add_argument("--manifest", help="training manifest")
    s.add_argument("--val-manifest", help="validation manifest")
    s.add_argument("--k", type=_positive, default=32, help="patches per image")
    s.add_argument("--epochs", type=_positive, default=50)
    s.add_argument("--batch-size", type=_positive, default=128)
    s.add_argument("--lr", type=float, default=0.015)
    s.set_defaults(func=cmd_train_cnn)

    s = sub.add_parser("extract-features", parents=[common, models], help="relu1 features of every patch")
    s.add_argument("--manifest")
    s.add_argument("--k", type=_positive, default=32)
    s.add_argument("--name", help="output file stem (default: manifest stem)")
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train-svm", parents=[common], help="train the one-vs-one SVM battery")
    s.add_argument("--features", help="training feature file")
    s.add_argument("--val-features", help="validation feature file")
    s.add_argument("--c-grid", type=_floats, default=list(svm.DEFAULT_C_GRID))
    s.set_defaults(func=cmd_train_svm)

    s = sub.add_parser("classify", parents=[common, models], help="attribute one image")
    s.add_argument("image")
    s.add_argument("--k", type=_positive, default=32)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("evaluate", parents=[common, models, figs], help="confusion matrix over a manifest")
    s.add_argument("--manifest")
    s.add_argument("--k", type=_positive, default=32)
    s.add_argument("--exclude-rejects", action="store_true", help="drop unclassifiable images from accuracy")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("curve", parents=[common, models, figs], help="accuracy versus voting patches")
    s.add_argument("--manifest")
    s.add_argument("--k-list", type=_ints, default=[1, 2, 4, 8, 16, 32])
    s.add_argument("--exclude-rejects", action="store_true")
    s.set_defaults(func=cmd_curve)

    s = sub.add_parser("localize", parents=[common, models, figs], help="block-wise attribution map")
    s.add_argument("image")
    s.add_argument("--block", type=int, default=64)
    s.set_defaults(func=cmd_localize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command not in ("classify",) and not args.out:
        print(f"camid {args.command}: error: --out is required", file=sys.stderr)
        return 2
    print(f"seed: {args.seed}")
    np.random.seed(args.seed)  # nothing should draw from the global stream; pinned anyway
    t0 = time.time()
    try:
        args.func(args)
    except (CliError, ValueError, OSError, ImageFormatError, cnn.TrainingError) as exc:
        print(f"camid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())

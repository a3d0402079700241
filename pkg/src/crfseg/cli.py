"""Command-line entry point.

Commands: oversegment, train, infer, eval, gradcheck (plus toydata for
generating the synthetic dataset).  Exit codes are a stable contract:
0 success, 1 numerical-check or metric failure, 2 usage/config/data
errors.  All commands honor --seed and are reproducible.
"""

import argparse
import os
import sys

import numpy as np

from . import evalio, gradcheck, pipeline
from .config import default_config, load_config
from .errors import (
    FormatError,
    InvalidArgumentError,
    PipelineStageError,
    SolverConvergenceError,
)
from .networks import load_checkpoint, save_checkpoint
from .superpixels import boundary_overlay, build_graph, oversegment, save_spmap


def _common_flags(parser):
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", help="override the config output directory")
    parser.add_argument("--verbose", action="store_true")


def _load_run_config(args):
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        config.override("seed", args.seed)
    if getattr(args, "out_dir", None):
        config.override("out_dir", args.out_dir)
    return config


def class_colors(k):
    """Fixed, distinct uint8 colors for label visualization."""
    base = np.array(
        [(40, 40, 40), (224, 172, 124), (180, 40, 40), (60, 120, 200), (60, 180, 90)],
        dtype=np.uint8,
    )
    if k <= base.shape[0]:
        return base[:k]
    hues = (np.arange(k) * 0.61803398875) % 1.0
    extra = np.stack([hues, 0.7 + 0 * hues, 0.9 + 0 * hues], axis=1)
    from .superpixels import _hsv_to_rgb

    return (_hsv_to_rgb(extra[:, 0], 0.7, 0.9) * 255).astype(np.uint8)


def cmd_oversegment(args):
    image = evalio.load_image(args.image)
    spmap = oversegment(image, args.regions, args.compactness)
    map_path = args.out + ".spx"
    overlay_path = args.out + ".overlay.png"
    save_spmap(spmap, map_path)
    evalio.save_image(boundary_overlay(image, spmap) / 255.0, overlay_path)
    if args.verbose:
        print(f"{spmap.region_count} regions -> {map_path}, {overlay_path}")
    return 0


def cmd_train(args):
    if not args.config:
        print("error: train requires --config", file=sys.stderr)
        return 2
    config = _load_run_config(args)
    manifest_path = config["data.manifest"]
    if not manifest_path:
        print("error: config key 'data.manifest' is empty", file=sys.stderr)
        return 2
    manifest = evalio.load_manifest(
        manifest_path, config["data.classes"], config["data.class_names"]
    )
    examples = evalio.load_examples(manifest)
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(config.echo())
    train_config = config.train_config()

    epoch_counter = {"n": 0}

    def checkpoint_each_epoch(params, metrics):
        epoch_counter["n"] = metrics.epoch
        save_checkpoint(params, os.path.join(out_dir, f"epoch_{metrics.epoch:03d}.ckpt"))

    with open(os.path.join(out_dir, "metrics.log"), "w") as log:
        params, _ = pipeline.train(
            examples, train_config, log_stream=log, on_epoch=checkpoint_each_epoch
        )
    save_checkpoint(params, os.path.join(out_dir, "final.ckpt"))
    if args.verbose:
        print(f"trained {epoch_counter['n']} epochs -> {out_dir}")
    return 0


def cmd_infer(args):
    config = _load_run_config(args)
    params = load_checkpoint(args.checkpoint, config.architecture())
    image = evalio.load_image(args.image)
    labels = pipeline.infer(image, params, config.train_config())
    evalio.save_labelmap(labels, args.out)
    colors = class_colors(config["data.classes"])
    overlay = 0.5 * image + 0.5 * colors[labels] / 255.0
    root, _ = os.path.splitext(args.out)
    evalio.save_image(overlay, root + ".overlay.png")
    if args.verbose:
        print(f"labels -> {args.out}")
    return 0


def cmd_eval(args):
    config = _load_run_config(args)
    params = load_checkpoint(args.checkpoint, config.architecture())
    manifest_path = args.manifest or config["data.manifest"]
    if not manifest_path:
        print("error: no manifest (use --manifest or data.manifest)", file=sys.stderr)
        return 2
    manifest = evalio.load_manifest(
        manifest_path, config["data.classes"], config["data.class_names"]
    )
    train_config = config.train_config()
    preds, gts = [], []
    for image, labels in evalio.load_examples(manifest):
        preds.append(pipeline.infer(image, params, train_config))
        gts.append(labels)
    report = evalio.evaluate(
        preds,
        gts,
        config["data.classes"],
        average=args.average,
        class_names=config["data.class_names"],
    )
    print(report.table())
    print(report.render(), end="")
    return 0


def cmd_gradcheck(args):
    config = _load_run_config(args)
    results, passed = gradcheck.run_all(seed=config["seed"], mutate=args.mutate)
    for result in results:
        print(result.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED checks: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_toydata(args):
    manifest = evalio.generate_toy_faces(args.seed or 0, args.count, args.size, args.out)
    print(f"wrote {len(manifest)} examples under {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crfseg",
        description="superpixel continuous-CRF segmentation: train, infer, verify",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oversegment", help="superpixel map + boundary overlay")
    p.add_argument("image")
    p.add_argument("--regions", type=int, default=256)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--out", required=True, help="output path prefix")
    _common_flags(p)
    p.set_defaults(func=cmd_oversegment)

    p = sub.add_parser("train", help="train from a config file")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a label map for one image")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--average", choices=("micro", "macro"), default="micro")
    _common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the numerical verification suite")
    p.add_argument(
        "--mutate",
        choices=gradcheck.MUTATIONS,
        help="deliberately corrupt one backward pass (harness self-test)",
    )
    _common_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toydata", help="generate the synthetic face-like dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    _common_flags(p)
    p.set_defaults(func=cmd_toydata)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        usage = isinstance(exc.cause, (InvalidArgumentError, FormatError))
        return 2 if usage else 1
    except (InvalidArgumentError, FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

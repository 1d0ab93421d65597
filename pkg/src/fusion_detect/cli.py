"""``fusion-detect`` command line.

Exit codes: 0 success, 1 usage, 2 data or validation problem, 3 numeric
failure (non-finite training loss, gradient check exceedance).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, preset
from .data.synth import synth_generate
from .data.transforms import read_image, resize_image
from .detection.anchors import write_anchor_file
from .errors import FusionDetectError, NumericError, ValidationError
from .evaluation import ReportRow, render_report
from .gradcheck import SCALES, format_results, run_gradcheck
from . import pipeline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
IMAGE_SUFFIXES = {".png", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp"}

log = logging.getLogger("fusion_detect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (default: the desk profile)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusion-detect", description="Fused two-backbone Faster R-CNN vehicle detector.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate-anchors", help="cluster box shapes into anchors")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--k", type=int, help="number of anchors (default: config)")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of scenes (default: config)")

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path)
    src.add_argument("--synth", type=int, nargs="?", const=-1, metavar="N",
                     help="train on N in-memory synthetic scenes (default: config)")
    p.add_argument("--split", choices=pipeline.SPLITS, default="train")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, help="total iterations (overrides the config)")

    p = sub.add_parser("detect", help="run a checkpoint on images")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--dir", type=Path)
    p.add_argument("--annotate", type=Path, help="directory for copies with boxes drawn")

    p = sub.add_parser("eval", help="TPR / FDR / fps report")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--split", choices=pipeline.SPLITS, default="test")
    p.add_argument("--name", help="dataset name for the report row")
    p.add_argument("--no-figure", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p)
    p.add_argument("--scale", choices=sorted(SCALES), default="tiny")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else preset("desk")
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _require_out(args, what: str) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required ({what})")
    return args.out


# -- subcommands ---------------------------------------------------------

def cmd_estimate_anchors(args) -> int:
    cfg = _run_config(args)
    k = args.k if args.k is not None else cfg.anchors.k
    if k < 1:
        raise UsageError("--k must be at least 1")
    out = _require_out(args, "anchor file")
    manifest = pipeline.read_manifest(args.manifest, cfg)
    data = pipeline.load_images(manifest, tuple(cfg.model.input_dims[:2]))
    cfg = cfg.model_copy(update={"anchors": cfg.anchors.model_copy(update={"k": k, "shapes": None})})
    anchors, miou = pipeline.anchors_for(cfg, data.boxes)
    write_anchor_file(anchors, out)
    print(f"mean IoU {miou:.6f} with k={anchors.k}; anchors written to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = _require_out(args, "dataset directory")
    n = args.n if args.n is not None else cfg.data.synth.scenes
    if n < 1:
        raise UsageError("--n must be at least 1")
    manifest = synth_generate(cfg.synth_config(), n, out)
    print(f"wrote {len(manifest)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _require_out(args, "run directory")
    model = state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = ckpt.config
        if args.seed is not None and args.seed != cfg.seed:
            raise ValidationError(f"--seed {args.seed} differs from the checkpoint's seed {cfg.seed}")
        model, state = ckpt.model(), ckpt.train_state()
    else:
        cfg = _run_config(args)
    if args.iterations is not None:
        if args.iterations < 0:
            raise UsageError("--iterations must be non-negative")
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"iterations": args.iterations})})

    if args.manifest:
        manifest = pipeline.manifest_split(pipeline.read_manifest(args.manifest, cfg), args.split, cfg)
        data = pipeline.load_images(manifest, tuple(cfg.model.input_dims[:2]))
    else:
        full = pipeline.synth_dataset(cfg, None if args.synth < 0 else args.synth)
        idx = pipeline.select_split(len(full), args.split, cfg.data.train_fraction, cfg.seed)
        data = pipeline.subset(full, idx)
    log.info("training on %d images for %d iterations", len(data), cfg.train.iterations)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    try:
        model, state = pipeline.run_training(cfg, data, out, model, state)
    except NumericError as exc:
        (out / "numeric_failure.txt").write_text(str(exc) + "\n", encoding="utf-8")
        raise
    write_anchor_file(model.cfg.anchors, out / "anchors.txt")
    if state.history:
        from .plotting import plot_losses
        plot_losses(state.history, out / "loss.png")
    print(f"trained to iteration {state.iteration}; checkpoint {out / 'checkpoint.fdck'}")
    return EXIT_OK


def _detection_json(name: str, dets, sx: float, sy: float, class_names) -> dict:
    return {"image": name, "detections": [
        {"box": {"x": d.box.x * sx, "y": d.box.y * sy, "w": d.box.w * sx, "h": d.box.h * sy},
         "label": class_names[d.class_id - 1], "score": d.score} for d in dets]}


def cmd_detect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = ckpt.model(), ckpt.config
    if args.image:
        paths = [args.image]
    else:
        if not args.dir.is_dir():
            raise ValidationError(f"not a directory: {args.dir}")
        paths = sorted(p for p in args.dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    hw = tuple(cfg.model.input_dims[:2])
    results = []
    for path in paths:
        try:
            original = read_image(path)
        except (FileNotFoundError, OSError) as exc:
            raise ValidationError(f"cannot read image {path}: {exc}") from None
        img, _ = resize_image(original, hw)
        dets = pipeline.detect_images(model, img[None], cfg.detect_config())[0]
        sy, sx = original.shape[0] / hw[0], original.shape[1] / hw[1]
        results.append(_detection_json(path.name, dets, sx, sy, cfg.model.class_names))
        if args.annotate:
            _annotate(original, results[-1], args.annotate / path.name)
    text = json.dumps(results, indent=2) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _annotate(image: np.ndarray, result: dict, path: Path) -> None:
    from PIL import Image, ImageDraw
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas = Image.fromarray(image)
    draw = ImageDraw.Draw(canvas)
    for d in result["detections"]:
        b = d["box"]
        draw.rectangle([b["x"], b["y"], b["x"] + b["w"] - 1, b["y"] + b["h"] - 1], outline=(255, 40, 40))
    canvas.save(path.with_suffix(".png"))


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = ckpt.model(), ckpt.config
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    iou_thr = args.iou_threshold if args.iou_threshold is not None else cfg.eval.iou_threshold
    if not 0 < iou_thr <= 1:
        raise UsageError("--iou-threshold must be in (0, 1]")
    manifest = pipeline.manifest_split(pipeline.read_manifest(args.manifest, cfg), args.split, cfg)
    data = pipeline.load_images(manifest, tuple(cfg.model.input_dims[:2]))
    match, fps = pipeline.evaluate(model, data, cfg.detect_config(), iou_thr)
    name = args.name if args.name is not None else args.manifest.resolve().parent.name
    row = ReportRow.from_match(name, match, fps)
    text = render_report([row], args.out, figure=not args.no_figure)
    print(text, end="")
    print(f"tp {match.tp}  fp {match.fp}  fn {match.fn}  (IoU >= {iou_thr})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(args.scale, seed)
    print(format_results(results), end="")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps([{"component": r.component, "max_error": r.max_error,
                                         "passed": r.passed} for r in results], indent=2) + "\n")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "estimate-anchors": cmd_estimate_anchors,
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _setup_logging() -> None:
    level = os.environ.get("FUSION_DETECT_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"FUSION_DETECT_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(LOG_LEVELS[level])
    log.propagate = False


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FusionDetectError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry_point() -> None:
    sys.exit(main())

"""Command line entry point: colorize, propagate, train, make-dataset, eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from functools import partial

import numpy as np

log = logging.getLogger("vidcolor")

HELP_WIDTH = 100

# defaults per subcommand; a value from --config overrides these and an
# explicit flag overrides both
DEFAULTS = {
    "colorize": {"input": None, "reference": None, "checkpoint": None, "out": None, "init_prev": "zero",
                 "corpus": None, "memory_budget_mb": 512, "gt": None},
    "propagate": {"input": None, "first_frame_color": None, "checkpoint": None, "out": None,
                  "init_prev": "zero", "memory_budget_mb": 512, "gt": None},
    "train": {"config": None},
    "make-dataset": {"images": None, "videos": None, "out": None, "seed": 0, "augments": 1,
                     "same_scene_fraction": 0.5, "crop": "108x192", "backbone": "toy"},
    "eval": {"pred": None, "gt": None, "flows": None, "report": None},
}


class CliError(Exception):
    def __init__(self, code, message, exit_code=1):
        self.code = code
        self.exit_code = exit_code
        super().__init__(message)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=34)


def _opt(parser, cmd, flag, help, **kw):
    dest = flag.lstrip("-").replace("-", "_")
    default = DEFAULTS[cmd].get(dest)
    suffix = "" if kw.get("action") == "store_true" else f" (default: {default})"
    parser.add_argument(flag, dest=dest, default=None, help=help + suffix, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidcolor", description="Exemplar-based video colorization.",
                                formatter_class=_formatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    for cmd, desc in (("colorize", "colorize a grayscale frame sequence from a reference image"),
                      ("propagate", "propagate the colors of a colorized first frame through a clip")):
        sp = sub.add_parser(cmd, help=desc, description=desc, formatter_class=_formatter)
        o = partial(_opt, sp, cmd)
        o("--config", "JSON file with option values", metavar="PATH")
        o("--input", "directory of frame_%%05d.png input frames", metavar="DIR")
        if cmd == "colorize":
            o("--reference", "reference color image, or 'auto' to retrieve from --corpus", metavar="PATH")
            o("--corpus", "image directory searched when --reference auto", metavar="DIR")
        else:
            o("--first-frame-color", "colorized version of frame 0", metavar="PATH")
        o("--checkpoint", "training checkpoint (.npz)", metavar="PATH")
        o("--out", "output directory for colorized frames", metavar="DIR")
        o("--init-prev", "previous-frame input at t=0", choices=["zero", "warped"])
        o("--memory-budget-mb", "max correlation matrix size before tiling", type=float, metavar="MB")
        o("--gt", "ground-truth frame directory; prints the per-frame PSNR series", metavar="DIR")

    sp = sub.add_parser("train", help="train the networks", description="train the networks",
                        formatter_class=_formatter)
    _opt(sp, "train", "--config", "JSON training config (TrainConfig fields)", metavar="PATH")
    sp.add_argument("--dry-run", action="store_true",
                    help="validate config and dataset, run one forward pass, write nothing (default: off)")
    sp.add_argument("--max-steps", type=int, default=None, help="override max_steps from the config (default: None)")

    desc = "build a training manifest from images and videos"
    sp = sub.add_parser("make-dataset", help=desc, description=desc, formatter_class=_formatter)
    o = partial(_opt, sp, "make-dataset")
    o("--config", "JSON file with option values", metavar="PATH")
    o("--images", "directory of still images to augment", metavar="DIR")
    o("--videos", "directory of clip subdirectories with flow/ files", metavar="DIR")
    o("--out", "output directory (manifest.jsonl is written here)", metavar="DIR")
    o("--seed", "random seed", type=int)
    o("--augments", "augmented pairs per image", type=int)
    o("--same-scene-fraction", "share of samples using their own frame as reference", type=float)
    o("--crop", "crop size HxW", metavar="HxW")
    o("--backbone", "feature backbone for reference retrieval", choices=["toy", "pretrained"])

    desc = "evaluate colorized videos"
    sp = sub.add_parser("eval", help=desc, description=desc, formatter_class=_formatter)
    o = partial(_opt, sp, "eval")
    o("--config", "JSON file with option values", metavar="PATH")
    o("--pred", "predicted frames: a frame directory or a directory of clip directories", metavar="DIR")
    o("--gt", "ground-truth frames, same layout as --pred", metavar="DIR")
    o("--flows", "flow directory (fwd_%%05d.flo, mask_%%05d.png), per clip when nested", metavar="DIR")
    o("--report", "also write machine-readable per-video records (JSON lines) here", metavar="PATH")
    return p


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS[command])
    cfg_path = getattr(args, "config", None)
    if cfg_path and command != "train":
        if not os.path.exists(cfg_path):
            raise CliError("config", f"config file not found: {cfg_path}", 2)
        with open(cfg_path) as fh:
            cfg = json.load(fh)
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise CliError("config", "; ".join(f"{k}: unknown option" for k in unknown), 2)
        opts.update(cfg)
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _require(opts, *names, code="config"):
    missing = [f"--{n.replace('_', '-')}: required" for n in names if not opts.get(n)]
    if missing:
        raise CliError(code, "; ".join(missing), 2)


def _must_exist(path, what):
    if not os.path.exists(path):
        raise CliError("missing-input", f"{what} not found: {path}", 1)


# --- subcommands ---------------------------------------------------------------------------


def _run_colorization(opts, reference_path, out=print):
    from .colorio import read_frame_sequence, read_lab, write_frame_sequence
    from .metrics import psnr_curve
    from .pipeline import colorize_clip
    from .training import load_model

    _must_exist(opts["input"], "input directory")
    _must_exist(opts["checkpoint"], "checkpoint")
    clip = read_frame_sequence(opts["input"])
    model = load_model(opts["checkpoint"])
    if reference_path == "auto":
        reference = _auto_reference(opts, clip[0], model)
    else:
        _must_exist(reference_path, "reference image")
        reference = read_lab(reference_path)
    budget = int(float(opts["memory_budget_mb"]) * 2**20)
    frames = colorize_clip(model, clip, reference, opts["init_prev"], budget)
    if len(frames) != len(clip):
        raise CliError("internal", "output frame count differs from input")
    write_frame_sequence(frames, opts["out"])
    out(f"wrote {len(frames)} frames to {opts['out']}")
    if opts.get("gt"):
        gt = read_frame_sequence(opts["gt"])
        curve = psnr_curve(frames, gt)
        out("psnr " + " ".join(f"{v:.4f}" for v in curve))
    return 0


def _auto_reference(opts, first_frame, model):
    from .colorio import read_lab
    from .datapipe import ReferenceIndex, _list_images, retrieve_references

    corpus_dir = opts.get("corpus")
    if not corpus_dir:
        raise CliError("config", "--corpus: required when --reference auto", 2)
    paths = _list_images(corpus_dir)
    if not paths:
        raise CliError("missing-input", f"no images in corpus {corpus_dir}")
    index = ReferenceIndex.build([read_lab(p) for p in paths], model.backbone, paths)
    best = retrieve_references(first_frame, index, 1, model.backbone)[0]
    log.info("auto-selected reference %s", best)
    return read_lab(best)


def cmd_colorize(opts, out=print):
    _require(opts, "input", "reference", "checkpoint", "out")
    return _run_colorization(opts, opts["reference"], out)


def cmd_propagate(opts, out=print):
    _require(opts, "input", "first_frame_color", "checkpoint", "out")
    return _run_colorization(opts, opts["first_frame_color"], out)


def cmd_train(args, out=print):
    from .training import ConfigError, TrainConfig, train

    if not args.config:
        raise CliError("config", "--config: required", 2)
    _must_exist(args.config, "config file")
    try:
        cfg = TrainConfig.from_file(args.config)
        if args.max_steps is not None:
            cfg.max_steps = args.max_steps
        cfg.validate()
    except ConfigError as exc:
        raise CliError("config", "; ".join(exc.problems), 2) from exc
    state, reports = train(cfg, dry_run=args.dry_run)
    if args.dry_run:
        out("dry run ok: config valid, dataset readable, forward pass succeeded")
    else:
        last = reports[-1].as_dict() if reports else {}
        out(f"trained to step {state.step}; last total loss {last.get('total', float('nan')):.6f}")
    return 0


def cmd_make_dataset(opts, out=print):
    from .datapipe import DatasetConfig, build_dataset

    _require(opts, "out")
    if not opts.get("images") and not opts.get("videos"):
        raise CliError("config", "--images/--videos: at least one is required", 2)
    try:
        crop = tuple(int(c) for c in str(opts["crop"]).lower().split("x"))
        cfg = DatasetConfig(crop=crop, augments_per_image=int(opts["augments"]),
                            same_scene_fraction=float(opts["same_scene_fraction"]), seed=int(opts["seed"]),
                            backbone=opts["backbone"])
    except ValueError as exc:
        raise CliError("config", str(exc), 2) from exc
    manifest = build_dataset(opts.get("images"), opts.get("videos"), opts["out"], cfg)
    with open(manifest) as fh:
        n = sum(1 for line in fh if line.strip())
    out(f"wrote {n} samples to {manifest}")
    return 0


def _clip_dirs(root):
    from .colorio import FRAME_PATTERN

    if os.path.exists(os.path.join(root, FRAME_PATTERN.format(0))):
        return {os.path.basename(os.path.normpath(root)): root}
    return {n: os.path.join(root, n) for n in sorted(os.listdir(root)) if os.path.isdir(os.path.join(root, n))}


def cmd_eval(opts, out=print):
    from .colorio import read_frame_sequence
    from .metrics import EvalReport, evaluate_video, load_flows

    _require(opts, "pred")
    _must_exist(opts["pred"], "prediction directory")
    preds = _clip_dirs(opts["pred"])
    gts = _clip_dirs(opts["gt"]) if opts.get("gt") else {}
    videos = []
    nested = len(preds) > 1 or not os.path.exists(os.path.join(opts["pred"], "frame_00000.png"))
    for name, pdir in preds.items():
        clip = read_frame_sequence(pdir)
        gt = read_frame_sequence(gts[name]) if name in gts else (
            read_frame_sequence(next(iter(gts.values()))) if len(gts) == 1 and len(preds) == 1 else None)
        flow_dir = opts.get("flows")
        if flow_dir and nested:
            flow_dir = os.path.join(flow_dir, name)
        flows, masks = load_flows(flow_dir, len(clip) - 1, clip.shape)
        videos.append(evaluate_video(name, clip, gt, flows if len(clip) > 1 else None, masks))
    report = EvalReport.aggregate(videos)
    out(report.text())
    if opts.get("report"):
        with open(opts["report"], "w") as fh:
            fh.write("\n".join(report.records()) + "\n")
    return 0


def main(argv=None, out=print) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_help()
        return 2
    try:
        if args.command == "train":
            return cmd_train(args, out)
        opts = resolve_options(args.command, args)
        handler = {"colorize": cmd_colorize, "propagate": cmd_propagate,
                   "make-dataset": cmd_make_dataset, "eval": cmd_eval}[args.command]
        return handler(opts, out)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, FileNotFoundError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

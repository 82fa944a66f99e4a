"""``evolving-boxes`` command line: gen-data, train, detect, eval, bench, render."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import (ArchitectureMismatchError, ConfigError, EvolvingBoxesError, FormatError,
                     NonFiniteLossError)

EXIT_IO = 2
EXIT_NON_FINITE = 3
EXIT_ARCHITECTURE = 4
EXIT_ID_MISMATCH = 5

log = logging.getLogger("evolving_boxes")


class IdMismatch(EvolvingBoxesError):
    pass


def _key_epilog() -> str:
    lines = ["config keys (set in a --config file as 'key = value' or as --key VALUE):"]
    for section in cfgmod.SECTIONS:
        lines.append(f"  [{section}]")
        for key in cfgmod.keys_for(section):
            choices = f" {{{','.join(key.choices)}}}" if key.choices else ""
            lines.append(f"    {key.name}{choices}: {key.help}")
    return "\n".join(lines)


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration")
    group.add_argument("--config", type=Path, help="flat key = value config file")
    group.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                       help="base preset (default desk)")
    group.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    keys = parent.add_argument_group("config keys")
    for key in cfgmod.SCHEMA.values():
        keys.add_argument(f"--{key.name}", dest=f"key_{key.name}", metavar=key.kind.upper(),
                          help=key.help)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="evolving-boxes", description="Two-stage vehicle detector on numpy.",
        epilog=_key_epilog(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, parents=[parent], help=help, description=help,
                              epilog=_key_epilog(), formatter_class=fmt)

    p = add("gen-data", "render a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)

    p = add("train", "train a model on a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="final checkpoint path")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--log", type=Path, help="loss log path (default: OUT.log)")

    p = add("detect", "run the detector and write a detection CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = add("eval", "score detections against a dataset")
    p.add_argument("--data", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dets", type=Path)
    src.add_argument("--ckpt", type=Path)
    p.add_argument("--iou", type=float, help="matching IoU (same as --iou_threshold)")
    p.add_argument("--pr-out", type=Path, default=Path("pr_curve.csv"))

    p = add("bench", "measure per-image detection latency")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--reps", type=int, default=1)

    p = add("render", "draw boxes onto an image")
    p.add_argument("--image", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dets", type=Path)
    src.add_argument("--annotations", type=Path)
    p.add_argument("--id", help="image id to select rows for (default: image file stem)")
    p.add_argument("--out", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# configuration plumbing


def _explicit_values(args) -> dict[str, str]:
    """Key values from the config file, then flags (flags win)."""
    values: dict[str, str] = {}
    if args.config is not None:
        values.update(cfgmod.parse_text(args.config.read_text(encoding="utf-8"),
                                        str(args.config)))
    values.pop("preset", None)
    for key in cfgmod.SCHEMA:
        v = getattr(args, f"key_{key}", None)
        if v is not None:
            values[key] = v
    if getattr(args, "iou", None) is not None:
        values["iou_threshold"] = repr(args.iou)
    return values


def _preset_name(args) -> str:
    if args.preset:
        return args.preset
    if args.config is not None:
        return cfgmod.parse_text(args.config.read_text(encoding="utf-8")).get("preset", "desk")
    return "desk"


def run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.PRESETS[_preset_name(args)]()
    cfgmod.apply(cfg, _explicit_values(args))
    return cfg.validate()


def _load_model(args):
    """Checkpoint weights under the checkpoint's config plus any explicit model keys."""
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    run = cfgmod.RunConfig(model=dataclasses.replace(ckpt.config))
    if args.preset:
        run.model = cfgmod.PRESETS[args.preset]().model
    cfgmod.apply(run, _explicit_values(args))
    ckpt.config = run.validate().model
    return ckpt.to_model(), run


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import generate_dataset, save_dataset

    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    cfg = run_config(args)
    save_dataset(args.out, generate_dataset(cfg.scene, args.count), cfg.scene)
    print(f"wrote {args.count} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
    from .data import load_dataset
    from .model import EvolvingBoxes
    from .train import train

    cfg = run_config(args)
    dataset = load_dataset(args.data)
    start = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        explicit = _explicit_values(args)
        run = cfgmod.RunConfig(model=ckpt.config)
        cfgmod.apply(run, {k: v for k, v in explicit.items()
                           if any(s == "model" for s, _ in cfgmod.SCHEMA[k].targets)})
        ckpt.config = run.validate().model
        model = ckpt.to_model()
        start = ckpt.iteration
    else:
        model = EvolvingBoxes.build(cfg.model, seed=cfg.train.seed)
    tcfg = dataclasses.replace(cfg.train,
                               total_iterations=max(0, cfg.train.total_iterations - start))
    log_path = args.log or Path(f"{args.out}.log")
    result = train(model, dataset, tcfg, start_iteration=start, log_path=log_path,
                   checkpoint_path=args.out)
    save_checkpoint(args.out, Checkpoint.from_model(model, result.iteration, result.lr))
    print(f"trained iterations {start}..{result.iteration}; checkpoint {args.out}; log {log_path}")
    return 0


def _images(args):
    from .data import load_dataset, read_image_ppm

    if args.image is not None:
        return [(args.image.stem, read_image_ppm(args.image))]
    return [(s.id, s.image) for s in load_dataset(args.data)]


def cmd_detect(args) -> int:
    from .evaluate import write_detections

    model, _ = _load_model(args)
    dets = {ident: model.detect(img) for ident, img in _images(args)}
    write_detections(args.out, dets)
    print(f"wrote {sum(map(len, dets.values()))} detections for {len(dets)} images to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import detect_all, evaluate, read_detections, write_pr_curve

    samples = load_dataset(args.data)
    if args.dets is not None:
        cfg = run_config(args)
        dets = read_detections(args.dets)
        known = {s.id for s in samples}
        for ident in dets:
            if ident not in known:
                raise IdMismatch(f"detection id {ident!r} is not in dataset {args.data}")
    else:
        model, cfg = _load_model(args)
        dets = detect_all(model, samples)
    result = evaluate(dets, samples, cfg.eval.iou_threshold)
    write_pr_curve(args.pr_out, result.pr_curve)
    print(result.report())
    return 0


def cmd_bench(args) -> int:
    from .data import load_dataset
    from .evaluate import bench

    model, _ = _load_model(args)
    images = [s.image for s in load_dataset(args.data)]
    print(bench(model, images, args.reps).report())
    return 0


def cmd_render(args) -> int:
    from .data import read_annotations, read_image_ppm, write_image_ppm
    from .evaluate import read_detections
    from .render import DETECTION_COLOR, IGNORE_COLOR, VEHICLE_COLOR, overlay

    image = read_image_ppm(args.image)
    ident = args.id or args.image.stem
    if args.dets is not None:
        boxes = [(d.box, DETECTION_COLOR) for d in read_detections(args.dets).get(ident, [])]
    else:
        boxes = [(r.annotation.box, IGNORE_COLOR if r.annotation.ignore else VEHICLE_COLOR)
                 for r in read_annotations(args.annotations) if r.id == ident]
    write_image_ppm(args.out, overlay(image, boxes))
    print(f"drew {len(boxes)} boxes to {args.out}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "detect": cmd_detect,
            "eval": cmd_eval, "bench": cmd_bench, "render": cmd_render}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NON_FINITE
    except ArchitectureMismatchError as exc:
        print(f"error: architecture mismatch: {exc}", file=sys.stderr)
        return EXIT_ARCHITECTURE
    except IdMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ID_MISMATCH
    except (OSError, FormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

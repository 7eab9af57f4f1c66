"""Command-line entry point: ``tinymil <subcommand> [flags]``.

Every pipeline subcommand reads an optional JSON config (``--config``); any
flag given on the command line overrides the matching config field.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .synthgen import SynthConfig, generate_dataset

PIPELINE_COMMANDS = {
    "split": "split",
    "train-bag": "train-bag",
    "saliency": "saliency",
    "extract-patches": "extract-patches",
    "build-instances": "build-instances",
    "train-instance": "train-instance",
    "evaluate": "evaluate",
}

# flag dest -> PipelineConfig field
OVERRIDES = {
    "seed": "seed",
    "mode": "mode",
    "k": "k",
    "patch_side": "patch_side",
    "threshold": "threshold",
    "out": "out_dir",
    "data": "dataset_root",
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("--k", type=int)
    p.add_argument("--patch-side", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", metavar="DIR", help="run directory")
    p.add_argument("--data", metavar="DIR", help="dataset root with positive/ and negative/ folders")
    p.add_argument("--no-figures", action="store_true", help="skip report figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinymil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sg = sub.add_parser("synth-gen", help="write a synthetic tiny-blob dataset")
    sg.add_argument("--config", metavar="PATH", help="JSON file; its 'synth' section (or the whole file) is used")
    sg.add_argument("--out", metavar="DIR", required=True)
    sg.add_argument("--seed", type=_u64)
    sg.add_argument("--n-images", type=int)
    sg.add_argument("--image-side", type=int)

    for name in list(PIPELINE_COMMANDS) + ["run-all"]:
        _common(sub.add_parser(name, help=f"run the {name} stage" if name != "run-all" else "run every stage"))
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        data.pop("synth", None)
    for dest, key in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            data[key] = value
    if getattr(args, "no_figures", False):
        data["figures"] = False
    return pipeline.PipelineConfig.from_dict(data)


def _synth(args) -> int:
    data = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        data = raw.get("synth", raw)
    for dest, key in (("seed", "seed"), ("n_images", "n_images"), ("image_side", "image_side")):
        value = getattr(args, dest)
        if value is not None:
            data[key] = value
    for key in ("blob_radius", "blobs_per_positive", "grain", "blur"):
        if key in data:
            data[key] = tuple(data[key])
    truth = generate_dataset(SynthConfig(**data), args.out)
    n_pos = sum(r["label"] == "positive" for r in truth["images"])
    print(f"wrote {len(truth['images'])} images ({n_pos} positive) to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth-gen":
            return _synth(args)
        cfg = load_config(args)
        if args.command == "run-all":
            metrics = pipeline.run_pipeline(cfg)
            print(json.dumps(metrics, indent=2, sort_keys=True))
        else:
            result = pipeline.run_stage(cfg, PIPELINE_COMMANDS[args.command])
            if args.command == "evaluate":
                print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, TypeError) as exc:
        stage = args.command
        print(f"error: [{stage}] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

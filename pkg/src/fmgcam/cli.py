"""``fmgcam`` command line: explain, evaluate, selfcheck.

Precedence: built-in defaults < ``--config`` YAML file < flags. Relative
output directories are placed under ``$FMGCAM_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import logging
import sys

import yaml

from . import selfcheck
from .errors import FMGCAMError
from .pipeline import cmd_evaluate, cmd_explain, load_config


def _model_option(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key, yaml.safe_load(value)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--adapter", help="model adapter name (testbed, torchvision)")
    p.add_argument("--checkpoint", help="model weights (state_dict) path")
    p.add_argument("--model-option", action="append", type=_model_option, default=[], metavar="KEY=VALUE",
                   help="extra adapter option, e.g. arch=resnet50; repeatable")
    p.add_argument("--layer", help='layer id or "auto" (deepest conv layer)')
    p.add_argument("-K", "--K", type=int, dest="K", help="number of top classes")
    p.add_argument("--activation", choices=("relu", "elu", "gelu"))
    p.add_argument("--norm", choices=("global", "per_map"))
    p.add_argument("--palette")
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--deletion-baseline", choices=("black", "mean", "blur"))
    p.add_argument("--insertion-start", choices=("blur", "black"))
    p.add_argument("--blur-sigma", type=float)
    p.add_argument("--cam-types", help="comma separated subset of fm_g_cam,grad_cam")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


def _overrides(args) -> dict:
    model = dict(args.model_option)
    model.update({"adapter": args.adapter, "checkpoint": args.checkpoint})
    return {
        "model": model,
        "layer": args.layer,
        "K": args.K,
        "activation": args.activation,
        "norm": args.norm,
        "palette": args.palette,
        "alpha": args.alpha,
        "metrics": {
            "steps": args.steps,
            "deletion_baseline": args.deletion_baseline,
            "insertion_start": args.insertion_start,
            "blur_sigma": args.blur_sigma,
        },
        "cam_types": args.cam_types,
        "output_dir": args.output_dir,
        "seed": args.seed,
        "workers": args.workers,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmgcam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="render fused overlays and comparison panels")
    _add_run_flags(p)
    p.add_argument("images", nargs="+", help="image files or directories")

    p = sub.add_parser("evaluate", help="deletion/insertion metrics over a folder of images")
    _add_run_flags(p)
    p.add_argument("dataset", help="directory of images")

    p = sub.add_parser("selfcheck", help="run the testbed oracle suite")
    p.add_argument("--inject-fault", choices=selfcheck.FAULTS, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "selfcheck":
        results = selfcheck.run(args.inject_fault)
        print(selfcheck.format_table(results))
        return 0 if all(r.passed for r in results) else 1
    try:
        config = load_config(args.config, _overrides(args))
        if args.command == "explain":
            res = cmd_explain(config, args.images)
            for m in res.manifests:
                print(f"{m['source']}: {m['files']['overlay']}, {m['files']['panel']}")
            for f in res.failures:
                print(f"{f['source']}: FAILED {f['error']}", file=sys.stderr)
            return res.exit_code
        res = cmd_evaluate(config, args.dataset)
        print(f"{len(res.records)} records -> {res.records_csv}")
        print(f"aggregate -> {res.aggregate_csv}")
        if res.skipped:
            print(f"skipped {len(res.skipped)} unreadable images", file=sys.stderr)
        return res.exit_code
    except FMGCAMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

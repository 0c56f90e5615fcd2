"""Command line: ``creative-diffusion {run, fit-centers, evaluate, export-grid, profiles}``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import OUTPUT_ROOT_ENV, load_config, profile_names, profile_path
from .exceptions import ConfigError
from .experiments import fit_centers, inference_schedule, run, write_grids
from .lora import load_adapters
from .models import load_denoiser

log = logging.getLogger("creative_diffusion")


def _config_arg(value):
    """A YAML path, or the name of a shipped profile."""
    if Path(value).exists():
        return Path(value)
    return profile_path(value)


def _add_config(p):
    p.add_argument("config", help="experiment YAML file or shipped profile name (see `profiles`)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set trainer.epochs=5 (repeatable)")
    p.add_argument("--output-dir", help="shortcut for --set output_dir=PATH")


def build_parser():
    parser = argparse.ArgumentParser(prog="creative-diffusion", description=__doc__,
                                     epilog=f"Relative output directories are placed under ${OUTPUT_ROOT_ENV} when it is set.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment a config describes (ddpo, can or evaluate)")
    _add_config(p)

    p = sub.add_parser("evaluate", help="run a config in evaluate mode")
    _add_config(p)

    p = sub.add_parser("fit-centers", help="fit k-means centers and write a cluster-set file")
    _add_config(p)
    p.add_argument("--source", choices=("text", "image"), required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True, help="output cluster-set path")

    p = sub.add_parser("export-grid", help="write PNG contact sheets, one per prompt")
    _add_config(p)
    p.add_argument("--checkpoint", required=True, help="base denoiser checkpoint (base.pt)")
    p.add_argument("--adapters", help="adapter checkpoint to apply on top of the base")
    p.add_argument("--out", help="directory for the PNGs (default: <output_dir>/grids)")

    sub.add_parser("profiles", help="list shipped desk-scale profiles")
    return parser


def _load(args, extra=()):
    overrides = list(args.overrides) + list(extra)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    return load_config(_config_arg(args.config), overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "profiles":
            for name in profile_names():
                print(name)
            return 0
        if args.command in ("run", "evaluate"):
            cfg = _load(args, ["mode=evaluate"] if args.command == "evaluate" else [])
            manifest = run(cfg)
            print(json.dumps({"output_dir": str(cfg.resolved_output_dir()), "status": manifest["status"],
                              "wall_time_seconds": round(manifest["wall_time_seconds"], 2)}))
            return 0
        if args.command == "fit-centers":
            cfg = _load(args)
            clusters = fit_centers(cfg, args.source, args.k, args.out)
            print(json.dumps({"out": args.out, "k": clusters.k, "d": clusters.d, "inertia": clusters.inertia}))
            return 0
        if args.command == "export-grid":
            cfg = _load(args)
            model, _ = load_denoiser(args.checkpoint)
            if args.adapters:
                load_adapters(model, args.adapters)
            out = Path(args.out) if args.out else cfg.resolved_output_dir() / "grids"
            paths = write_grids(cfg, model, inference_schedule(cfg), out)
            print(json.dumps({"grids": [str(p) for p in paths]}))
            return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``blocksplat <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import apply_overrides, config_from_file
from .pipeline import STAGES, Pipeline, StageOrderError
from .synthetic import SyntheticSpec, generate_synthetic

VERBS = STAGES + ("synth", "full")


def _stage_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (keys as in config.resolved.json)")
    p.add_argument("--data", dest="dataset_root", help="dataset root holding cameras.txt")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--coarse-scene", dest="coarse_scene", help="externally trained coarse PLY (skips training)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. refine.iterations=60 (repeatable)")
    p.add_argument("--no-contraction", action="store_true", help="partition in world space")
    p.add_argument("--no-so", action="store_true", help="disable SSIM-based view assignment")
    p.add_argument("--no-bo", action="store_true", help="disable camera-position view assignment")
    p.add_argument("--no-idgp", action="store_true", help="disable importance pruning")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blocksplat", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in STAGES + ("full",):
        _stage_args(sub.add_parser(verb, help=f"run the {verb} stage" if verb != "full" else "run every stage"))
    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=500, help="number of Gaussians")
    s.add_argument("--m", type=int, default=24, help="number of cameras")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    return ap


def _config(args):
    cfg = config_from_file(args.config, dataset_root=args.dataset_root, output_dir=args.output_dir,
                           coarse_scene=args.coarse_scene, seed=args.seed, workers=args.workers)
    flags = []
    if args.no_contraction:
        flags.append("contraction=false")
    if args.no_so:
        flags.append("so_assignment=false")
    if args.no_bo:
        flags.append("bo_assignment=false")
    if args.no_idgp:
        flags.append("idgp=false")
    return apply_overrides(cfg, list(args.set) + flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "synth":
        meta = generate_synthetic(args.out, SyntheticSpec(n_gaussians=args.n, n_cameras=args.m, seed=args.seed,
                                                          width=args.width, height=args.height))
        print(json.dumps({"out": args.out, "count": meta["count"], "holdout": meta["holdout"]}))
        return 0
    pipe = Pipeline(_config(args))
    stages = STAGES if args.verb == "full" else (args.verb,)
    try:
        for stage in stages:
            manifest = pipe.run(stage)
            print(json.dumps({"stage": stage, "memory": manifest["memory"],
                              **({"mean_psnr_db": manifest["mean_psnr_db"]} if stage == "evaluate" else {})}))
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

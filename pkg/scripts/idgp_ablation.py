"""Pruning control experiment on a coarse scene trained without pruning:
no pruning vs. removing the lowest-scored 20% vs. the highest-scored 20%."""
import argparse

import numpy as np

from blocksplat.config import PipelineConfig
from blocksplat.model import BYTES_PER_PRIMITIVE, load_scene_ply
from blocksplat.pipeline import Pipeline, evaluate, summary_row
from blocksplat.prune import accumulate_hits, prune, score
from blocksplat.refine import RefineConfig, refine_block


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("data", help="dataset root (see make_fixture.py)")
    ap.add_argument("--fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = PipelineConfig(dataset_root=args.data)
    pipe = Pipeline(cfg)
    init = load_scene_ply(cfg.root / cfg.init_scene)
    ccfg = RefineConfig(**{**cfg.coarse.to_dict(), "prune_fraction": 0.0, "seed": args.seed})
    coarse = refine_block(np.arange(len(init)), init, pipe.train_views, ccfg).scene
    table = score(accumulate_hits(coarse, pipe.train_views, None, cfg.score_scale), coarse)
    idx = np.arange(len(coarse))
    variants = {"none": coarse,
                "bottom": prune(coarse, idx, table, args.fraction, lowest=True)[0],
                "top": prune(coarse, idx, table, args.fraction, lowest=False)[0]}
    base = None
    print("| pruned | primitives | bytes | PSNR (dB) | drop (dB) |")
    print("|---|---|---|---|---|")
    for name, sc in variants.items():
        p = summary_row(evaluate(sc, pipe.test_views), name)["psnr_db"]
        base = p if base is None else base
        print(f"| {name} | {len(sc)} | {len(sc) * BYTES_PER_PRIMITIVE} | {p:.3f} | {base - p:.3f} |")


if __name__ == "__main__":
    main()

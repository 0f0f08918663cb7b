"""Data-division ablation: full pipeline vs. dropping contraction, SSIM-based
or camera-position view assignment. Prints a markdown table of held-out PSNR."""
import argparse
from pathlib import Path

from blocksplat.config import PipelineConfig, apply_overrides
from blocksplat.pipeline import Pipeline

VARIANTS = {
    "full": [],
    "w/o contraction": ["contraction=false"],
    "w/o SO assignment": ["so_assignment=false"],
    "w/o BO assignment": ["bo_assignment=false"],
    "w/o IDGP": ["idgp=false"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("data", help="dataset root (see make_fixture.py)")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--set", action="append", default=[], help="extra config override KEY=VALUE")
    args = ap.parse_args()

    rows = []
    for name, flags in VARIANTS.items():
        out = Path(args.out) / name.replace("/", "").replace(" ", "_")
        cfg = apply_overrides(PipelineConfig(dataset_root=args.data, output_dir=str(out)), args.set + flags)
        pipe = Pipeline(cfg)
        pipe.run_all()
        ev = pipe.manifest("evaluate")
        mem = pipe.manifest("merge")["memory"]
        rows.append((name, ev["mean_psnr_db"], ev["coarse_mean_psnr_db"], mem["merged_primitives"]))
        print(f"done {name}: {ev['mean_psnr_db']:.3f} dB", flush=True)

    print("\n| variant | held-out PSNR (dB) | coarse PSNR (dB) | primitives |")
    print("|---|---|---|---|")
    for name, p, c, n in rows:
        print(f"| {name} | {p:.3f} | {c:.3f} | {n} |")


if __name__ == "__main__":
    main()

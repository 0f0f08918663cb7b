"""Generate the synthetic dataset used by the experiments and acceptance tests."""
import argparse
import json

from blocksplat.synthetic import SyntheticSpec, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--m", type=int, default=24)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    meta = generate_synthetic(args.out, SyntheticSpec(n_gaussians=args.n, n_cameras=args.m, width=args.size,
                                                      height=args.size, seed=args.seed))
    print(json.dumps({"count": meta["count"], "holdout": meta["holdout"],
                      "groups": {k: len(v) for k, v in meta["groups"].items()}}))


if __name__ == "__main__":
    main()

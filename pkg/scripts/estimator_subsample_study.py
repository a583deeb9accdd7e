"""MMD estimator statistics as a function of sample-set size.

Subsamples a pool of graphs at several sizes and tabulates the mean and
standard deviation of each descriptor MMD against a fixed test set. By
default the pool is the lobster train split (same law as the test split,
so the mean decays toward zero); pass --samples to study model output
instead.
"""

import argparse
import pathlib

from anfm.data import DatasetSpec, generate, load
from anfm.evaluation import KINDS, estimator_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=pathlib.Path, default=None,
                    help="optional .gds pool; default: lobster train split")
    ap.add_argument("--sizes", default="16,32,64,128,256")
    ap.add_argument("--repeats", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    splits = generate(DatasetSpec(family="lobster", seed=42, train=512, val=64,
                                  test=256, params={"min_n": 10, "max_n": 30}))
    test_g = [r.graph for r in splits.test]
    if args.samples is not None:
        pool = [r.graph for r in load(args.samples)]
    else:
        pool = [r.graph for r in splits.train]
    sizes = [int(s) for s in args.sizes.split(",")]

    study = estimator_study(pool, test_g, sizes, repeats=args.repeats,
                            seed=args.seed)
    header = "size " + "".join(f"{k:>22s}" for k in KINDS)
    print(header)
    for i, size in enumerate(sizes):
        row = f"{size:4d} "
        for kind in KINDS:
            m = study[kind]["mean"][i]
            s = study[kind]["std"][i]
            row += f"  {m:9.3e}+-{s:8.2e}"
        print(row)


if __name__ == "__main__":
    main()

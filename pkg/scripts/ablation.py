"""Validation loss of the full tiny model and of each single-feature ablation."""

import argparse

from ihdnet.experiments import ABLATIONS, ablation

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--train", type=int, default=100)
    ap.add_argument("--val", type=int, default=20)
    args = ap.parse_args()
    print("seed,full," + ",".join(f"without_{k}" for k in ABLATIONS))
    for seed in args.seeds:
        row = ablation(seed, args.train, args.val)
        print(f"{seed},{row.full:.6f}," + ",".join(f"{row.ablated[k]:.6f}" for k in ABLATIONS), flush=True)

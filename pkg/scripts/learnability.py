"""Train the tiny model on 8 synthetic series and report the training loss."""

import argparse

from ihdnet.experiments import learnability

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    for seed in args.seeds:
        res = learnability(seed)
        print(f"seed {seed}: training loss {res.train_loss:.5f} ({res.seconds:.0f}s)")

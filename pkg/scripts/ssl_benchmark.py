"""Supervised baseline against one pseudo-label round on the 200/50/800 synthetic benchmark."""

import argparse

from ihdnet.experiments import ssl_benchmark

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = ap.parse_args()
    print("seed,baseline,ssl,selected,pseudo_accuracy,seconds")
    for seed in args.seeds:
        r = ssl_benchmark(seed)
        print(f"{seed},{r.baseline:.6f},{r.ssl:.6f},{r.selected},{r.pseudo_accuracy:.4f},{r.seconds:.0f}", flush=True)

"""Reference-conditioned model vs identity projection on two contrasting devices."""

import argparse
import csv

import torch

from pestsim.experiments import cmm_comparison, summarize_cmm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="cmm_comparison.csv")
    args = ap.parse_args()
    torch.set_num_threads(1)
    rows = cmm_comparison(seeds=tuple(args.seeds), data_seed=args.data_seed)
    fields = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("variant", "seed"), k))
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['variant']:>8} seed {r['seed']}: {r['mean_device_acc']:.4f} ({r['epochs']} epochs, {r['seconds']:.0f} s)")
    s = summarize_cmm(rows)
    print(f"mean per-device accuracy: cmm {s['cmm']:.4f}  identity {s['identity']:.4f}")


if __name__ == "__main__":
    main()

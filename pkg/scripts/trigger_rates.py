"""Per-species trigger accuracy on single-pest campaigns."""

import argparse
import csv
import sys

from pestsim.config import load_config, parse_config
from pestsim.experiments import trigger_rates


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="run config (defaults used when omitted)")
    ap.add_argument("--events", type=int, default=200, help="pests released per species")
    ap.add_argument("--out", help="CSV path (stdout when omitted)")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else parse_config("")
    rows = trigger_rates(cfg.device_template(), seed=cfg.seed, n_events=args.events,
                         n_devices=cfg.device.n_devices)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()

"""Desk-scale ablation: baseline / dual / full objective, mean rank-1 over seeds."""

import argparse
import json
import logging

from crossreid.experiment import run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--json", default=None, help="write the full result dict here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    r = run_ablation(tuple(args.seeds), args.world_seed)
    for mode, row in r.items():
        print(f"{mode:9s} rank-1 {row['mean_rank1']:.3f}  mAP {row['mean_map']:.3f}  "
              f"per-seed {[round(x, 3) for x in row['rank1']]}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(r, f, indent=2)


if __name__ == "__main__":
    main()

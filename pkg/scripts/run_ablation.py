"""Regularizer-group ablation over several seeds (four masks, scored under P1(0.08)).

    python3 scripts/run_ablation.py [configs/bundled.json] [--seeds 5]
"""
import argparse
import logging

import numpy as np

from drive_cbm import experiment, synthdata
from drive_cbm.config import load
from drive_cbm.training import train_base


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default="configs/bundled.json")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load(args.config)
    per_seed = []
    for s in range(args.seeds):
        c = experiment.with_seed(cfg, s)
        ds = synthdata.generate(c.data)
        base, _ = train_base(ds.train, ds.val, ds.concept_space, c.train, c.dims)
        rows = experiment.ablation_for(cfg, s, ds, base)
        per_seed.append(rows)
        print(f"seed {s}: " + "  ".join(f"{r.label}={r.top_k:.3f}" for r in rows), flush=True)

    print(f"\nmedian over {len(per_seed)} seeds")
    print(f"{'A':2} {'BC':2} {'DE':2} {'ad_mae':>8} {'top_k':>6}")
    for i, row in enumerate(per_seed[0]):
        ad = np.median([rows[i].ad_mae for rows in per_seed])
        top = np.median([rows[i].top_k for rows in per_seed])
        flags = ["x", "x" if row.mask[0] else "", "x" if row.mask[2] else ""]
        print(f"{flags[0]:2} {flags[1]:2} {flags[2]:2} {ad:8.3f} {top:6.3f}")


if __name__ == "__main__":
    main()

"""Perturbation sweep over several seeds; prints the per-cell median table.

    python3 scripts/run_sweep.py [configs/bundled.json] [--seeds 5] [--out runs/sweep.json]
"""
import argparse
import json
import logging
from pathlib import Path

from drive_cbm import experiment
from drive_cbm.config import load


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default="configs/bundled.json")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", help="write per-seed tables and medians as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load(args.config)
    runs = [experiment.run_seed(cfg, s) for s in range(args.seeds)]
    med = experiment.median_table([r.table for r in runs])

    print(f"median over {len(runs)} seeds, k={cfg.topk}")
    print(f"{'model':6} {'perturbation':12} {'a_mae':>8} {'d_mae':>8} {'ad_mae':>8} {'top_k':>6}")
    for (model, label), cols in med.items():
        top = f"{cols['top_k']:.3f}" if "top_k" in cols else "-"
        print(f"{model:6} {label:12} {cols['a_mae']:8.3f} {cols.get('d_mae', float('nan')):8.3f} "
              f"{cols['ad_mae']:8.3f} {top:>6}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        doc = {"config": cfg.to_dict(),
               "seeds": [{"seed": r.seed, "rows": r.table.rows} for r in runs],
               "median": [{"model": m, "perturbation": p, **c} for (m, p), c in med.items()]}
        Path(args.out).write_text(json.dumps(doc, indent=2))


if __name__ == "__main__":
    main()

"""Top-1 / mAP as a function of the number of generated variants per image.

Reuses the generated set of an existing run directory (K=10 by default) and
trains one progressive model on the first K variants of every image for each
requested K (K=0 is the originals-only baseline). Results land in
``<run>/ksweep/`` and the report is regenerated with the sweep table and plot.

    python3 scripts/k_sweep.py --out runs/seed0 --ks 0 4 6 8 10
"""
import argparse
from pathlib import Path

from ccreid import pipeline
from ccreid.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="run directory produced by `ccreid run`")
    ap.add_argument("--ks", type=int, nargs="+", default=[0, 4, 6, 8, 10])
    args = ap.parse_args()
    run = Path(args.out)
    config = load_config(run / "config.json")
    rows = pipeline.k_sweep(config, run, tuple(args.ks))
    for r in rows:
        print(f"K={r['K']:2d}  top-1 {r['top1']:.4f}  mAP {r['mAP']:.4f}")
    pipeline.report(config, run)


if __name__ == "__main__":
    main()

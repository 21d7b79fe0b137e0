"""Run every stage for one seed and print the six evaluation results.

    python3 scripts/run_pipeline.py --out runs/seed0 --seed 0

The seed is applied to the dataset, diffusion training, expansion, re-id
training and query variants, which is exactly how the acceptance suite builds
each of its five end-to-end runs.
"""
import argparse
import json

from ccreid import pipeline
from ccreid.config import RunConfig, load_config


def seeded(config: RunConfig, seed: int) -> RunConfig:
    d = config.to_dict()
    for section in ("dataset", "diffusion", "expansion", "reid", "refinement"):
        d[section]["seed"] = seed
    return RunConfig.from_dict(d)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    config = load_config(args.config) if args.config else RunConfig()
    config = seeded(config, args.seed)
    config.out = args.out
    results = pipeline.run_all(config, args.out)
    print(json.dumps({k: {"top1": v["top1"], "mAP": v["mAP"]} for k, v in results.items()}, indent=2))


if __name__ == "__main__":
    main()

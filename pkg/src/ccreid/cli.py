"""``ccreid`` command line: one subcommand per pipeline stage.

Every command resolves a RunConfig (``--config`` file, else the run
directory's ``config.json``, else defaults), applies its flags and any
``--set section.key=value`` overrides, stores the result back as the run's
``config.json`` and runs its stage.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config, set_value
from .errors import ArtifactError, ConfigError, DataError, NumericalError, ProtocolError

EXIT_CONFIG, EXIT_ARTIFACT, EXIT_RUNTIME = 2, 3, 4

# flag dest -> dotted config key
FLAG_KEYS = {
    "subjects": "dataset.subjects",
    "noise_std": "dataset.noise_std",
    "steps": None,  # depends on the command
    "t": "schedule.T",
    "beta_start": "schedule.beta_start",
    "beta_end": "schedule.beta_end",
    "lr": None,
    "guidance_weight": "guidance.weight",
    "k": "expansion.K",
    "n": "reid.N",
    "epochs": "reid.epochs",
    "mode": "reid.mode",
    "l": "refinement.l",
    "m": "refinement.m",
}

_COMMAND_SECTION = {"train-diffusion": "diffusion", "train-disc": "guidance.train",
                    "expand": "expansion", "train-reid": "reid", "evaluate": "refinement",
                    "gen-data": "dataset"}


def _schedule_flags(p):
    p.add_argument("--t", type=int, help="diffusion steps T")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccreid", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="run directory (default: config 'out')")
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. reid.lr=0.02")
    common.add_argument("--seed", type=int, help="seed of this command's stage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--subjects", type=int)
    p.add_argument("--noise-std", type=float)

    p = sub.add_parser("train-diffusion", parents=[common], help="train the conditional denoiser")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    _schedule_flags(p)

    p = sub.add_parser("train-disc", parents=[common], help="train the guidance discriminator")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    _schedule_flags(p)

    p = sub.add_parser("expand", parents=[common], help="generate K clothes-changed variants per image")
    p.add_argument("--k", type=int)
    p.add_argument("--guidance-weight", type=float,
                   help="enable discriminator guidance with this weight (needs train-disc)")
    p.add_argument("--no-guidance", action="store_true")
    _schedule_flags(p)

    p = sub.add_parser("train-reid", parents=[common], help="train the embedding model")
    p.add_argument("--mode", choices=["baseline", "progressive", "merged"])
    p.add_argument("--progressive", action="store_true", help="shorthand for --mode progressive")
    p.add_argument("--n", type=int, help="partition widening period in epochs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="clothes-changing top-1 / mAP")
    p.add_argument("--mode", choices=["baseline", "progressive", "merged"])
    p.add_argument("--refine", action="store_true", help="ensemble over l inpainted query variants")
    p.add_argument("--l", type=int)
    p.add_argument("--m", type=int)
    _schedule_flags(p)

    sub.add_parser("report", parents=[common], help="ablation / K-sweep / PCA tables")
    sub.add_parser("run", parents=[common], help="every stage, all modes, then report")
    return parser


def resolve_config(args) -> tuple[RunConfig, Path]:
    if args.config:
        config = load_config(args.config)
    elif args.out and (Path(args.out) / "config.json").exists():
        config = load_config(Path(args.out) / "config.json")
    else:
        config = RunConfig()
    section = _COMMAND_SECTION.get(args.command)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if key is None:
            key = f"{section}.{dest}"
        set_value(config, key, json.dumps(value))
    if getattr(args, "progressive", False):
        config.reid.mode = "progressive"
    if args.command == "expand":
        if args.guidance_weight is not None:
            config.guidance.enabled = True
        if args.no_guidance:
            config.guidance.enabled = False
    if args.seed is not None:
        if section is None:
            raise ConfigError(f"--seed is not meaningful for {args.command}; use --set")
        set_value(config, f"{section}.seed", str(args.seed))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        set_value(config, key.strip(), raw.strip())
    if args.out:
        config.out = args.out
    config.validate()
    return config, Path(config.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config, run = resolve_config(args)
        run.mkdir(parents=True, exist_ok=True)
        if args.command != "report":
            pipeline.save_config(run, config)
        cmd = args.command
        if cmd == "gen-data":
            pipeline.gen_data(config, run)
        elif cmd == "train-diffusion":
            pipeline.train_diffusion(config, run)
        elif cmd == "train-disc":
            pipeline.train_disc(config, run)
        elif cmd == "expand":
            pipeline.expand(config, run)
        elif cmd == "train-reid":
            pipeline.train_reid(config, run)
        elif cmd == "evaluate":
            pipeline.evaluate_run(config, run, refine=args.refine)
        elif cmd == "report":
            pipeline.report(config, run)
        elif cmd == "run":
            pipeline.run_all(config, run)
    except ConfigError as e:
        print(f"ccreid: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as e:
        print(f"ccreid: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (NumericalError, ProtocolError, DataError) as e:
        print(f"ccreid: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())

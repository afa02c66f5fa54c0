"""Command-line entry point.

    simofdm train    --config cfg.yaml [--set key=value ...] [--seed N] [--out DIR]
    simofdm finetune --config cfg.yaml --from ckpt.npz ...
    simofdm evaluate --config cfg.yaml [--from ckpt.npz] ...
    simofdm sweep    --config cfg.yaml ...
    simofdm export   --config cfg.yaml --from ckpt.npz [--bits B] ...
    simofdm plot     --report report.csv --out figure.png

Exit codes: 0 success, 2 configuration/validation failure, 3 runtime failure.
"""

import argparse
import os
import sys

from . import runner
from .config import apply_overrides, load_config, validate
from .errors import ConfigError, SimOfdmError
from .rng import SeedHub

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser():
    parser = argparse.ArgumentParser(prog="simofdm",
                                     description="Stacked-metasurface OFDM link trainer and simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="YAML run configuration")
            p.add_argument("--set", dest="overrides", action="append", default=[],
                           metavar="KEY=VALUE", help="override a config key (repeatable)")
            p.add_argument("--seed", type=int, default=None, help="override the master seed")
            p.add_argument("--out", default=None, help="override the output directory")

    add_common(sub.add_parser("train", help="train a model per the config"))
    p = sub.add_parser("finetune", help="fine-tune a checkpoint on an instantaneous channel")
    add_common(p)
    p.add_argument("--from", dest="from_checkpoint", required=True)
    p = sub.add_parser("evaluate", help="measure BER (untrained baseline without --from)")
    add_common(p)
    p.add_argument("--from", dest="from_checkpoint", default=None)
    add_common(sub.add_parser("sweep", help="run the configured parameter sweep"))
    p = sub.add_parser("export", help="partition and export deployment bundles and phase maps")
    add_common(p)
    p.add_argument("--from", dest="from_checkpoint", required=True)
    p.add_argument("--bits", type=int, default=None, help="quantize phases to this many bits")
    p = sub.add_parser("plot", help="render a BER report CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load(args):
    if not os.path.exists(args.config):
        raise ConfigError(f"config file not found: {args.config}")
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    return validate(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            result = runner.run_plot(args.report, args.out)
        else:
            cfg = _load(args)
            hub = SeedHub(cfg.seed)
            run_dir = runner.make_run_dir(cfg, args.command)
            if args.command == "train":
                result = runner.run_train(cfg, run_dir, hub)
            elif args.command == "finetune":
                result = runner.run_finetune(cfg, run_dir, hub, args.from_checkpoint)
            elif args.command == "evaluate":
                result = runner.run_evaluate(cfg, run_dir, hub, args.from_checkpoint)
            elif args.command == "sweep":
                result = runner.run_sweep(cfg, run_dir, hub)
            elif args.command == "export":
                result = runner.run_export(cfg, run_dir, hub, args.from_checkpoint, args.bits)
            else:  # unreachable: argparse restricts choices
                raise ConfigError(f"unknown command {args.command!r}")
            result["run_dir"] = run_dir
        for key, value in result.items():
            print(f"{key}: {value}")
        return EXIT_OK
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SimOfdmError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

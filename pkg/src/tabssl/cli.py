"""Command-line entry point.

Subcommands map onto the experiment runners; shared flags override the
config file. Exit codes: 0 success, 2 configuration problem, 3 data
problem, 4 numeric divergence.
"""

import argparse
import logging
import sys

from .errors import ConfigError, DataError, NumericError
from . import experiments

log = logging.getLogger(__name__)


def _add_common(p):
    p.add_argument("--seed-list", type=str, default=None,
                   help="comma-separated seeds, overrides the config")
    p.add_argument("--out", type=str, default=None,
                   help="output directory, overrides the config")
    p.add_argument("--precision", choices=("f32", "f64"), default=None,
                   help="float width for model parameters and activations")
    p.add_argument("--threads", type=int, default=1,
                   help="run seeds on a thread pool of this size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabssl",
        description="contrastive self-supervised pretraining for tabular data",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("blobs", "bimodal_blobs"), default="blobs")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--d", type=int, default=200)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--imbalance", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)

    for name, helptext in (
        ("run", "run the experiment described by a config file"),
        ("sweep-mask", "mask-rate sweep"),
        ("sweep-missing", "missingness robustness comparison"),
        ("hpo", "random-search hyperparameter optimization"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", type=str)
        if name == "sweep-mask":
            p.add_argument("--rates", type=str, default=None,
                           help="comma-separated mask rates, overrides the config")
        _add_common(p)

    p = sub.add_parser("duo", help="bimodal DuoFTT experiments")
    p.add_argument("mode", choices=("joint", "clip", "unmatched", "cross_omics",
                                    "duo_vs_wide"))
    p.add_argument("config", type=str)
    _add_common(p)

    p = sub.add_parser("report", help="aggregate results under a directory")
    p.add_argument("out_dir", type=str)
    return parser


def _load(args) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(args.config)
    if args.seed_list is not None:
        try:
            seeds = [int(s) for s in args.seed_list.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad --seed-list: {args.seed_list!r}") from None
        if not seeds:
            raise ConfigError("--seed-list is empty")
        cfg.seeds = seeds
    if args.out is not None:
        cfg.out_dir = args.out
    if args.precision is not None:
        cfg.precision = args.precision
    if args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    return cfg


_RUN_DISPATCH = {
    "unimodal": experiments.run_unimodal,
    "label_fraction_sweep": experiments.run_label_fraction_sweep,
}


def _dispatch(args) -> int:
    if args.command == "synth":
        paths = experiments.make_synthetic(
            args.kind, args.n, args.d, args.classes, args.noise, args.seed,
            args.out, imbalance=args.imbalance)
        for path in paths:
            print(path)
        return 0
    if args.command == "report":
        experiments.emit_report(args.out_dir)
        print(f"wrote {args.out_dir}/report/summary.csv")
        return 0

    cfg = _load(args)
    if args.command == "run":
        if cfg.kind == "mask_rate_sweep":
            experiments.run_mask_rate_sweep(cfg, threads=args.threads)
        elif cfg.kind == "missingness":
            experiments.run_missingness(cfg, threads=args.threads)
        elif cfg.kind == "hpo":
            experiments.run_hpo(cfg)
        elif cfg.kind in ("duo_joint", "duo_clip", "duo_unmatched",
                          "cross_omics", "duo_vs_wide"):
            mode = cfg.kind[4:] if cfg.kind.startswith("duo_") else cfg.kind
            mode = {"vs_wide": "duo_vs_wide"}.get(mode, mode)
            experiments.run_duo(cfg, mode, threads=args.threads)
        else:
            _RUN_DISPATCH[cfg.kind](cfg, threads=args.threads)
    elif args.command == "sweep-mask":
        rates = None
        if args.rates is not None:
            try:
                rates = [float(r) for r in args.rates.split(",") if r.strip()]
            except ValueError:
                raise ConfigError(f"bad --rates: {args.rates!r}") from None
        experiments.run_mask_rate_sweep(cfg, rates=rates, threads=args.threads)
    elif args.command == "sweep-missing":
        experiments.run_missingness(cfg, threads=args.threads)
    elif args.command == "duo":
        experiments.run_duo(cfg, args.mode, threads=args.threads)
    elif args.command == "hpo":
        experiments.run_hpo(cfg)
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown command {args.command!r}")
    print(f"wrote {cfg.out_dir}/results.csv")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

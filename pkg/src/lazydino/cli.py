"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures (diverged solves, indefinite covariances, diverged training).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .io import ArchiveError, ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
OUT_ENV = "LAZYDINO_OUT"

logger = logging.getLogger("lazydino")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply to omitted keys)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config value")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lazydino", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, parents=[common], help=help)

    add("offline", "build the subspace, training data and surrogate")
    q = add("online", "train a surrogate-driven lazy map for one observation")
    q.add_argument("--offline", required=True, help="output directory of the offline command")
    q.add_argument("--y", required=True, help="observation archive")
    q.add_argument("--index", type=int, default=0)
    q.add_argument("--samples", type=int, default=0, help="number of pushforward samples to write")
    for name, help in (("laplace", "MAP point and Laplace approximation"),
                       ("mcmc", "pCN reference chains"),
                       ("lazymap", "lazy map trained on the true forward model")):
        q = add(name, help)
        q.add_argument("--y", required=True, help="observation archive")
        q.add_argument("--index", type=int, default=0)
        if name == "laplace":
            q.add_argument("--samples", type=int, default=None)
        if name == "mcmc":
            q.add_argument("--offline", help="check split R-hat on the latent coordinates of this basis")
        if name == "lazymap":
            q.add_argument("--offline", help="reuse the basis of an offline run")
            q.add_argument("--samples", type=int, default=0)
    q = add("diagnose", "compare sample archives against a reference")
    q.add_argument("--y", required=True)
    q.add_argument("--index", type=int, default=0)
    q.add_argument("--method", action="append", required=True, metavar="LABEL=DIR",
                   help="method label and samples archive (repeatable)")
    q.add_argument("--reference", required=True, help="reference samples archive")
    q.add_argument("--offline", help="offline directory, enables latent skewness errors")
    q.add_argument("--map-reference", help="laplace archive whose MAP point anchors the MAP error")
    q.add_argument("--bip", default="bip")
    q = add("amortize", "one lazy map per observation from a single surrogate")
    q.add_argument("--offline", required=True)
    q.add_argument("--y", required=True, help="observation archive with one row per observation")
    q.add_argument("--n-eval", type=int)
    q = add("prior-sample", "draw prior fields and optionally synthetic observations")
    q.add_argument("-n", type=int, default=1)
    q.add_argument("--observe", action="store_true")
    return p


def run(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    out = args.out or os.environ.get(OUT_ENV, "out")
    c = args.command
    if c == "offline":
        pipeline.cmd_offline(cfg, out)
    elif c == "online":
        pipeline.cmd_online(cfg, args.offline, args.y, out, args.index, args.samples)
    elif c == "laplace":
        pipeline.cmd_laplace(cfg, args.y, out, args.index, args.samples)
    elif c == "mcmc":
        pipeline.cmd_mcmc(cfg, args.y, out, args.index, offline=args.offline)
    elif c == "lazymap":
        pipeline.cmd_lazymap(cfg, args.y, out, args.offline, args.index, args.samples)
    elif c == "diagnose":
        methods = {}
        for spec in args.method:
            label, sep, path = spec.partition("=")
            if not sep:
                raise ConfigError(f"--method expects LABEL=DIR, got {spec!r}")
            methods[label] = path
        pipeline.cmd_diagnose(cfg, args.y, methods, args.reference, out, args.offline, args.map_reference,
                              args.index, args.bip)
    elif c == "amortize":
        pipeline.cmd_amortize(cfg, args.offline, args.y, out, args.n_eval)
    elif c == "prior-sample":
        pipeline.cmd_prior_sample(cfg, out, args.n, args.observe)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return run(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if exc.numerical else EXIT_CONFIG
    except (ConfigError, ArchiveError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

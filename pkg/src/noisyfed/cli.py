"""Command line entry point: ``noisyfed run|figure|verify|pathnorm``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import __version__
from .errors import ConfigError, DataError, ParseError, VerificationError
from .experiment import FIGURES, emit_figure_data, load_spec, read_manifest, run_sweep, verify_manifest
from .nn import load_snapshot, path_norm_proxy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisyfed", description=__doc__)
    parser.add_argument("--version", action="version", version=f"noisyfed {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every cell of a sweep spec")
    run.add_argument("spec", help="path to a key = value spec file")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--out", help="override the output directory")
    run.add_argument("--threads", type=int, default=1, help="cells run concurrently (default 1)")
    run.add_argument("--limit", type=int, help="truncate the training set to this many examples")
    run.add_argument("--force", action="store_true", help="rerun cells even if their outputs exist")

    fig = sub.add_parser("figure", help="write plot data for one figure")
    fig.add_argument("manifest", help="run directory or its manifest.txt")
    fig.add_argument("figure", choices=FIGURES)

    ver = sub.add_parser("verify", help="re-check a finished run")
    ver.add_argument("manifest", help="run directory or its manifest.txt")

    pn = sub.add_parser("pathnorm", help="print the path-norm proxy of a model snapshot")
    pn.add_argument("snapshot")
    return parser


def _cmd_run(args) -> int:
    spec = load_spec(args.spec)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = args.out
        overrides["base_dir"] = "."
        if spec.dataset == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                overrides[key] = str(spec.resolve(getattr(spec, key)))
    if args.limit is not None:
        overrides["limit"] = args.limit
    if overrides:
        spec = replace(spec, **overrides)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    manifest = run_sweep(spec, threads=args.threads, force=args.force)
    print(manifest.root / "manifest.txt")
    return EXIT_OK


def _cmd_figure(args) -> int:
    print(emit_figure_data(read_manifest(args.manifest), args.figure))
    return EXIT_OK


def _cmd_verify(args) -> int:
    manifest = read_manifest(args.manifest)
    problems = verify_manifest(manifest)
    for p in problems:
        print(p)
    if problems:
        return EXIT_VERIFY
    print(f"ok: {len(manifest.cells)} cells")
    return EXIT_OK


def _cmd_pathnorm(args) -> int:
    try:
        model = load_snapshot(args.snapshot)
    except OSError as exc:
        raise DataError(f"cannot read snapshot: {exc}") from None
    print(repr(path_norm_proxy(model)))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "figure": _cmd_figure, "verify": _cmd_verify, "pathnorm": _cmd_pathnorm}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

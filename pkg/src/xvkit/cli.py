"""Command-line entry point: ``xvkit <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, NetSpecParseError, NumericalError, ShapeError, XvkitError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# subcommand -> (first stage, last stage) of the pipeline
STAGE_COMMANDS = {
    "features": ("features", "vad"),
    "train": ("train", "train"),
    "extract": ("extract", "extract"),
    "backend-fit": ("lda", "adapt"),
    "score": ("score", "score"),
    "asnorm": ("asnorm", "asnorm"),
    "calibrate": ("calibrate", "calibrate"),
    "fuse": ("fuse", "fuse"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _global_options(p):
    p.add_argument("--config", type=Path, help="INI pipeline configuration file")
    p.add_argument("--seed", type=int, help="override the configured base seed")
    p.add_argument("--workers", type=int, help="worker processes / threads")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_options(common)
    work = _Parser(add_help=False)
    work.add_argument("--workdir", type=Path, default=Path("work"), help="pipeline work directory")
    work.add_argument("--force", action="store_true", help="rerun stages even if up to date")

    p = _Parser(prog="xvkit", description="Speaker-embedding training and verification back-end toolkit.")
    p.add_argument("--version", action="version", version=f"xvkit {__version__}")
    _global_options(p)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-toy", parents=[common], help="write a synthetic feature corpus")
    g.add_argument("out", type=Path)

    for name, (a, b) in STAGE_COMMANDS.items():
        sub.add_parser(name, parents=[common, work], help=f"run pipeline stages {a}..{b}")

    r = sub.add_parser("run", parents=[common, work], help="run a range of pipeline stages (default: all)")
    r.add_argument("--from", dest="start", help="first stage")
    r.add_argument("--to", dest="stop", help="last stage")

    e = sub.add_parser("evaluate", parents=[common, work],
                       help="metric report for a score file, or the pipeline evaluate stage")
    e.add_argument("--scores", type=Path)
    e.add_argument("--key", type=Path)

    v = sub.add_parser("validate-spec", parents=[common], help="check a network description")
    v.add_argument("spec", help="builtin architecture name or path to a netspec file")
    v.add_argument("--show", action="store_true", help="print the canonical rendering")

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    c.add_argument("--arch", action="append", help="architecture (repeatable; default all)")
    c.add_argument("--loss", action="append", help="loss kind (repeatable; default all)")
    c.add_argument("--tol", type=float, default=1e-4)

    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return p


def _merge_globals(args, argv):
    # options may appear before or after the subcommand; parse the top-level copy separately
    top = _Parser(add_help=False)
    _global_options(top)
    known, _ = top.parse_known_args(argv[: argv.index(args.command)] if args.command in argv else [])
    for name in ("config", "seed", "workers"):
        if getattr(args, name) is None:
            setattr(args, name, getattr(known, name))
    args.verbose = max(args.verbose, known.verbose)


def _config(args):
    from .pipeline import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.workers is not None:
        kw["workers"] = args.workers
    return dataclasses.replace(cfg, **kw) if kw else cfg


def _cmd_gen_toy(args) -> int:
    from .pipeline import gen_toy_audio, write_toy_corpus

    cfg = _config(args)
    corpus = gen_toy_audio(cfg.toy, cfg.seed)
    write_toy_corpus(corpus, args.out)
    print(f"wrote {len(corpus.feats)} utterances to {args.out}")
    return EXIT_OK


def _cmd_stages(args, start, stop) -> int:
    from .pipeline import run_pipeline

    result = run_pipeline(_config(args), args.workdir, start, stop, force=args.force)
    for key in result.ran:
        print(f"ran      {key}")
    for key in result.skipped:
        print(f"up to date {key}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .calibration import format_report
    from .pipeline import evaluate, run_pipeline

    cfg = _config(args)
    if args.scores or args.key:
        if not (args.scores and args.key):
            raise ConfigError("--scores and --key must be given together")
        report = evaluate(args.scores, args.key, cfg.dcf, name=args.scores.stem)
        sys.stdout.write(format_report([report]))
        return EXIT_OK
    run_pipeline(cfg, args.workdir, "evaluate", "evaluate", force=args.force)
    sys.stdout.write((args.workdir / "report.txt").read_text())
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .netspec import BUILTIN_NAMES, builtin, parse_netspec, receptive_field, render_netspec, validate

    if args.spec in BUILTIN_NAMES:
        spec = builtin(args.spec)
    else:
        try:
            text = Path(args.spec).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.spec}: {exc}") from None
        spec = parse_netspec(text)
    report = validate(spec)
    print(report)
    if report.ok:
        for b in spec.branch_names:
            left, right = receptive_field(spec, b)
            print(f"branch {b}: receptive field -{left}/+{right} frames")
        print(f"embedding dim {spec.embedding_dim}")
    if args.show:
        sys.stdout.write(render_netspec(spec))
    return EXIT_OK if report.ok else EXIT_DATA


def _cmd_grad_check(args) -> int:
    from .embedder import LossConfig, grad_check
    from .embedder.losses import LOSS_KINDS
    from .netspec import BUILTIN_NAMES, builtin

    cfg = _config(args)
    archs = args.arch or list(BUILTIN_NAMES)
    losses = args.loss or list(LOSS_KINDS)
    worst = 0.0
    for a in archs:
        if a not in BUILTIN_NAMES:
            raise ConfigError(f"unknown architecture {a!r}")
        for k in losses:
            rep = grad_check(builtin(a), LossConfig(kind=k), seed=cfg.seed)
            worst = max(worst, rep.max_rel_error)
            status = "ok  " if rep.max_rel_error < args.tol else "FAIL"
            print(f"{status} {a:10s} {k:11s} {rep}")
    return EXIT_OK if worst < args.tol else EXIT_NUMERICAL


def _cmd_show_config(args) -> int:
    from .pipeline import config_hash, render_config

    cfg = _config(args)
    sys.stdout.write(render_config(cfg))
    print(f"; hash {config_hash(cfg)}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _merge_globals(args, argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-toy":
            return _cmd_gen_toy(args)
        if args.command in STAGE_COMMANDS:
            return _cmd_stages(args, *STAGE_COMMANDS[args.command])
        if args.command == "run":
            return _cmd_stages(args, args.start, args.stop)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "validate-spec":
            return _cmd_validate(args)
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        if args.command == "show-config":
            return _cmd_show_config(args)
    except (ConfigError, NetSpecParseError) as exc:
        print(f"xvkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_DATA
    except NumericalError as exc:
        print(f"xvkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ShapeError, XvkitError, OSError) as exc:
        print(f"xvkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

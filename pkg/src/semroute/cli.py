"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 input data error,
3 embedding provider error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import embedder, pipeline, route_monitor
from .as_profile import ProfileError
from .cdr import DivergenceError, SupervisionError
from .pipeline import ConfigError, RunConfig, StageError

log = logging.getLogger("semroute")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--provider", choices=("mock", "http"))
    p.add_argument("--window-secs", type=int, dest="window_secs")
    p.add_argument("--reduced-dim", type=int, dest="reduced_dim")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semroute", description="BGP route change anomaly detection")
    parser.add_argument("--gen-fixture", metavar="DIR",
                        help="write a synthetic scenario with injected incidents to DIR and exit")
    parser.add_argument("--fixture-seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in pipeline.STAGES:
        _common(sub.add_parser(name))
    pr = sub.add_parser("perturb", help="write a noisy copy of the relationship file")
    _common(pr)
    pr.add_argument("--noise", choices=("delete", "add", "flip"), required=True)
    pr.add_argument("--ratio", type=float, required=True)
    pr.add_argument("--out", required=True)
    ra = sub.add_parser("run-all")
    _common(ra)
    ra.add_argument("--train-cdr", action="store_true", default=None, dest="train_cdr")
    return parser


def _gen_fixture(outdir: str, seed) -> int:
    from . import scenario

    params = scenario.ScenarioParams() if seed is None else scenario.ScenarioParams(seed=seed)
    truth = scenario.generate(Path(outdir), params)
    print(f"wrote fixture to {outdir} ({len(truth['incidents'])} incidents)", file=sys.stderr)
    return EXIT_OK


def _overrides(args) -> dict:
    keys = ("jobs", "seed", "provider", "window_secs", "reduced_dim", "train_cdr")
    return {k: getattr(args, k, None) for k in keys}


def _classify(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, embedder.EmbeddingError):
        return EXIT_PROVIDER
    if isinstance(exc, (ValueError, KeyError, OSError, ProfileError, SupervisionError,
                        DivergenceError, route_monitor.OutOfOrderError, json.JSONDecodeError)):
        return EXIT_DATA
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.gen_fixture:
        return _gen_fixture(args.gen_fixture, args.fixture_seed)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = RunConfig.load(args.config, **_overrides(args))
        if args.command == "run-all":
            report, summary = pipeline.run_all(cfg)
            for stage, info in summary.items():
                print(f"{stage}: {json.dumps(info, sort_keys=True)}", file=sys.stderr)
            print(f"report: {report}", file=sys.stderr)
        elif args.command == "perturb":
            info = pipeline.run_perturb(cfg, args.noise, args.ratio,
                                        cfg.seed, Path(args.out))
            print(f"perturb: {json.dumps(info, sort_keys=True)}", file=sys.stderr)
        else:
            info = pipeline.RUNNERS[args.command](cfg)
            print(f"{args.command}: {json.dumps(info, sort_keys=True)}", file=sys.stderr)
    except Exception as exc:
        code = _classify(exc)
        print(f"semroute: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

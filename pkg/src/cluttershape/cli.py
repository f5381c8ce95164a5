"""Command-line front end for the clutter shape pipeline.

Subcommands: gen (simulate a scene), estimate (fuse masks + fit shapes),
eval (score results against ground truth), bench (multi-scene aggregate).
Options come from defaults < TOML config file < command-line flags; the
CLUTTERSHAPE_OUT environment variable sets the default output root.

Exit codes: 0 success (including degenerate empty results), 1 usage error,
2 data error (bad or missing inputs), 3 internal error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .fitting import MODES, FitConfig
from .masks import NoiseConfig
from .pipeline import (
    BENCH_PRESETS,
    DEFAULT_H,
    DataError,
    PRESETS,
    PipelineConfig,
    StageError,
    cmd_bench,
    cmd_estimate,
    cmd_eval,
    cmd_gen,
)

OUT_ENV = "CLUTTERSHAPE_OUT"


class UsageError(RuntimeError):
    """Bad flags or config-file values."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; we reserve 2 for data
    errors, so surface parse failures as UsageError (exit 1) instead."""

    def error(self, message):
        raise UsageError(message)


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="TOML config file; explicit flags override it")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--objects", type=int,
                        help="override the preset's object count")
    parser.add_argument("--h-threshold", type=float, dest="h_threshold",
                        help="cross-view mergence threshold (m^2)")
    parser.add_argument("--noise-erode", type=int, dest="noise_erode",
                        help="mask erosion radius in pixels")
    parser.add_argument("--noise-flip", type=float, dest="noise_flip",
                        help="per-mask category flip probability")
    parser.add_argument("--noise-drop", type=float, dest="noise_drop",
                        help="per-mask drop probability")
    parser.add_argument("--fit-evals", type=int, dest="fit_evals",
                        help="objective evaluation budget per simplex stage")
    parser.add_argument("--fit-samples", type=int, dest="fit_samples",
                        help="points sampled from the deformed template per evaluation")
    parser.add_argument("--reverse-weight", type=float, dest="reverse_weight",
                        help="weight of the prediction->observation Chamfer term")
    parser.add_argument("--mode", choices=MODES,
                        help="deformation mode used when fitting")
    parser.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cluttershape",
                     description="Category-level shape estimation in dense clutter.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", parents=[], help="generate and persist one scene")
    _add_shared(p)
    p.add_argument("--dir", help="scene directory (default <out>/<preset>_seed<seed>)")

    p = sub.add_parser("estimate", help="segment a scene and fit shapes")
    _add_shared(p)
    p.add_argument("scene_dir", help="directory written by gen")
    p.add_argument("--results", help="results directory (default <scene>/results)")

    p = sub.add_parser("eval", help="score estimate results against ground truth")
    _add_shared(p)
    p.add_argument("scene_dir", help="directory written by gen")
    p.add_argument("results_dir", help="directory written by estimate")

    p = sub.add_parser("bench", help="aggregate metrics over seeded scenes")
    _add_shared(p)
    p.add_argument("--scenes", type=int, help="scene repetitions per preset")
    p.add_argument("--presets", nargs="+", choices=sorted(PRESETS),
                   help=f"presets to bench (default {' '.join(BENCH_PRESETS)})")
    p.add_argument("--modes", nargs="+", choices=MODES,
                   help="fit modes to compare (default all)")
    p.add_argument("--dir", help="report directory (default <out>)")
    return parser


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


_TOP_KEYS = {"preset", "seed", "objects", "h_threshold", "categories",
             "out", "mode", "scenes", "noise", "fit"}


def _check_keys(table: dict, allowed, where: str) -> None:
    unknown = set(table) - set(allowed)
    if unknown:
        raise UsageError(f"unknown {where} key(s): {', '.join(sorted(unknown))}")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge defaults, the optional TOML file, and explicit flags."""
    data: dict = {}
    if getattr(args, "config", None):
        data = _load_toml(args.config)
        _check_keys(data, _TOP_KEYS, "config")
    noise_data = dict(data.get("noise", {}))
    fit_data = dict(data.get("fit", {}))
    _check_keys(noise_data, {f.name for f in dataclass_fields(NoiseConfig)}, "[noise]")
    _check_keys(fit_data, {f.name for f in dataclass_fields(FitConfig)}, "[fit]")

    def pick(name: str, default, key: str = None):
        value = getattr(args, name, None)
        if value is not None:
            return value
        return data.get(key or name, default)

    if getattr(args, "noise_erode", None) is not None:
        noise_data["erode_px"] = args.noise_erode
    if getattr(args, "noise_flip", None) is not None:
        noise_data["flip_prob"] = args.noise_flip
    if getattr(args, "noise_drop", None) is not None:
        noise_data["drop_prob"] = args.noise_drop
    if getattr(args, "fit_evals", None) is not None:
        fit_data["max_evaluations"] = args.fit_evals
    if getattr(args, "fit_samples", None) is not None:
        fit_data["samples"] = args.fit_samples
    if getattr(args, "reverse_weight", None) is not None:
        fit_data["reverse_weight"] = args.reverse_weight

    out = pick("out", None)
    if out is None:
        out = os.environ.get(OUT_ENV, "out")
    return PipelineConfig(
        preset=pick("preset", "easy"),
        seed=pick("seed", 0),
        categories=tuple(data.get("categories", ("box", "can", "cup", "ball"))),
        noise=NoiseConfig(**noise_data),
        h=pick("h_threshold", DEFAULT_H),
        fit=FitConfig(**fit_data),
        out=str(out),
        scenes=pick("scenes", 10),
        mode=pick("mode", "full"),
        objects=pick("objects", None),
    )


def _dispatch(args: argparse.Namespace, config: PipelineConfig) -> None:
    if args.command == "gen":
        cmd_gen(config, args.dir)
    elif args.command == "estimate":
        cmd_estimate(args.scene_dir, config, args.results)
    elif args.command == "eval":
        cmd_eval(args.scene_dir, args.results_dir)
    elif args.command == "bench":
        cmd_bench(
            config,
            presets=tuple(args.presets) if args.presets else BENCH_PRESETS,
            modes=tuple(args.modes) if args.modes else MODES,
            directory=args.dir,
        )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (gen, estimate, eval, bench)")
        config = build_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except tomllib.TOMLDecodeError as exc:  # subclasses ValueError; match first
        print(f"data error: cannot parse {args.config}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:  # config validation
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2

    try:
        _dispatch(args, config)
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if exc.kind == "data" else 3
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unclassified is a bug
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

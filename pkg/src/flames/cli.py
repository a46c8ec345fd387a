"""Command-line front end: one subcommand per stage plus `pipeline`.

Exit codes: 0 on success, 1 on usage errors (bad flags, bad config), 2 on
data errors (missing or unparsable inputs, inconsistent artifacts). Data
errors print a single diagnostic line naming the offending path.

Configuration is an INI-style file of flat key-value sections; flags override
the file. The seed resolves in order: FLAMES_SEED environment variable, then
`--seed`, then the config file, then the generator default.

    [run]
    seed = 20120402
    threads = 1

    [testgen]
    flutes = 120
    cellos = 80
    days = 14
    buildings = 40
    servers = 150

    [fit]
    cap = 50000

    [model]
    folds = 5
    clusters = 2
    kmax = 8
    restarts = 8

    [synth]
    n = 1000
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

from flames.ingest import IngestError
from flames.learn import KExceedsN, ModelFeatureMismatch, SingleClassInput
from flames.mobility import EmptyInput
from flames.pipeline import (
    PipelineError,
    Settings,
    run_classify,
    run_correlate,
    run_features,
    run_fit,
    run_fuse,
    run_ingest,
    run_mobility,
    run_model,
    run_pipeline,
    run_synth,
    run_testgen,
    run_traffic,
)
from flames.synth import SpecInvalid
from flames.traffic import EmptyGroup

# (section, key) -> Settings attribute; everything is an integer
CONFIG_KEYS = {
    ("run", "seed"): "seed",
    ("run", "threads"): "threads",
    ("testgen", "flutes"): "flutes",
    ("testgen", "cellos"): "cellos",
    ("testgen", "days"): "days",
    ("testgen", "buildings"): "buildings",
    ("testgen", "servers"): "servers",
    ("fit", "cap"): "fit_cap",
    ("model", "folds"): "folds",
    ("model", "clusters"): "clusters",
    ("model", "kmax"): "kmax",
    ("model", "restarts"): "restarts",
    ("synth", "n"): "synth_n",
}

_DATA_ERRORS = (
    IngestError, PipelineError, SpecInvalid, SingleClassInput, KExceedsN,
    ModelFeatureMismatch, EmptyInput, EmptyGroup, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage problems; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_config(path: str) -> dict[str, int]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    values: dict[str, int] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            attr = CONFIG_KEYS.get((section, key))
            if attr is None:
                raise UsageError(f"{path}: unknown config key [{section}] {key}")
            try:
                values[attr] = int(raw)
            except ValueError:
                raise UsageError(f"{path}: [{section}] {key} must be an integer, got {raw!r}")
    return values


def build_settings(args: argparse.Namespace) -> Settings:
    values: dict[str, int] = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for attr in ("seed", "threads", "flutes", "cellos", "days", "buildings",
                 "servers", "folds", "clusters", "kmax", "restarts",
                 "synth_n", "fit_cap"):
        flag = getattr(args, attr, None)
        if flag is not None:
            values[attr] = flag
    env = os.environ.get("FLAMES_SEED")
    if env is not None:
        try:
            values["seed"] = int(env)
        except ValueError:
            raise UsageError(f"FLAMES_SEED must be an integer, got {env!r}")
    settings = Settings(**values)
    if settings.threads < 1:
        raise UsageError("--threads must be >= 1")
    return settings


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="run directory for artifacts")
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--seed", type=int, help="run seed (FLAMES_SEED overrides)")
    p.add_argument("--threads", type=int, help="worker cap for parallel stages")


def _add_testgen_flags(p: argparse.ArgumentParser) -> None:
    for name in ("flutes", "cellos", "days", "buildings", "servers"):
        p.add_argument(f"--{name}", type=int, help=f"population {name}")


def build_parser() -> _Parser:
    parser = _Parser(prog="flames", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    specs = {
        "testgen": "generate a seeded synthetic trace under <out>/raw",
        "ingest": "parse and canonicalize the raw logs",
        "fuse": "derive leases and attribute flows to devices",
        "classify": "label devices by vendor prefix and ad-traffic heuristic",
        "mobility": "daily mobility metrics per device",
        "traffic": "daily traffic metrics per device",
        "features": "join mobility and traffic rows into one table",
        "correlate": "feature correlation matrices and CFS subset",
        "fit": "rank distribution families per device type",
        "model": "train and evaluate svm, kmeans or gmm",
        "synth": "sample synthetic device-days from stored mixtures",
        "pipeline": "run every stage in order",
    }
    parsers = {}
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        parsers[name] = p
    _add_testgen_flags(parsers["testgen"])
    _add_testgen_flags(parsers["pipeline"])
    parsers["ingest"].add_argument("--raw", help="raw log directory (default <out>/raw)")
    parsers["pipeline"].add_argument(
        "--raw", help="ingest existing raw logs instead of running testgen")
    parsers["model"].add_argument(
        "which", nargs="?", default="all", choices=("svm", "kmeans", "gmm", "all"),
        help="which model family to run (default all)")
    for name in ("fit", "pipeline"):
        parsers[name].add_argument("--cap", dest="fit_cap", type=int,
                                   help="max flow-level samples per fit")
    for name in ("model", "pipeline"):
        parsers[name].add_argument("--folds", type=int, help="cross-validation folds")
        parsers[name].add_argument("--clusters", type=int, help="k for k-means")
        parsers[name].add_argument("--kmax", type=int, help="largest mixture size tried")
        parsers[name].add_argument("--restarts", type=int, help="EM restarts kept best")
    for name in ("synth", "pipeline"):
        parsers[name].add_argument("--n", dest="synth_n", type=int,
                                   help="synthetic rows per device type")
    return parser


def _dispatch(args: argparse.Namespace, settings: Settings) -> None:
    out = args.out
    if args.command == "testgen":
        paths = run_testgen(out, settings)
        print(f"testgen: seed {settings.spec().seed}, "
              f"{len(paths)} files under {paths['ap_log'].parent}")
    elif args.command == "ingest":
        report = run_ingest(out, settings, raw=args.raw)
        print(f"ingest: {report['ap_log']['records']} associations, "
              f"{report['netflow']['records']} flows "
              f"({report['ap_log']['skipped'] + report['netflow']['skipped']} lines skipped)")
    elif args.command == "fuse":
        report = run_fuse(out, settings)
        print(f"fuse: {report['leases']['leases']} leases, "
              f"{report['match']['matched']} attributed flows, "
              f"{report['match']['unmatched']} unmatched")
    elif args.command == "classify":
        report = run_classify(out, settings)
        print(f"classify: {report['devices']} devices, "
              f"{report['flutes']} flutes, {report['cellos']} cellos, "
              f"{report['unknown']} unknown")
    elif args.command == "mobility":
        print(f"mobility: {run_mobility(out, settings)} device-days")
    elif args.command == "traffic":
        print(f"traffic: {run_traffic(out, settings)} device-days")
    elif args.command == "features":
        print(f"features: {run_features(out, settings)} joined device-days")
    elif args.command == "correlate":
        doc = run_correlate(out, settings)
        print(f"correlate: 3 matrices, CFS kept {len(doc['selected'])} features")
    elif args.command == "fit":
        print(f"fit: {run_fit(out, settings)} ranked fits")
    elif args.command == "model":
        results = run_model(out, settings, which=args.which)
        for name in sorted(results):
            if name == "svm":
                acc = results[name]
                detail = ", ".join(f"{k} {v:.4f}" for k, v in acc.items())
            elif name == "kmeans":
                detail = ", ".join(f"{k} {v:.4f}" for k, v in results[name].items())
            else:
                per = results[name]["per_type"]
                detail = ", ".join(f"{t} k={per[t]['combined_k']}" for t in sorted(per))
            print(f"model {name}: {detail}")
    elif args.command == "synth":
        print(f"synth: {run_synth(out, settings)} synthetic device-days")
    elif args.command == "pipeline":
        ran = run_pipeline(out, settings, raw=args.raw,
                           progress=lambda stage: print(f"pipeline: {stage} done"))
        print(f"pipeline: {len(ran)} stages complete under {out}")
    else:  # pragma: no cover - argparse enforces the choices
        raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = build_settings(args)
    except UsageError as exc:
        print(f"flames: error: {exc}", file=sys.stderr)
        return 1
    try:
        _dispatch(args, settings)
    except UsageError as exc:
        print(f"flames: error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"flames: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

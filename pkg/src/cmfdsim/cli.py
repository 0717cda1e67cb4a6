"""Command-line entry point.

Exit codes: 0 on success, 1 for usage or configuration problems, 2 when a
run fails at runtime (divergence, protocol violation).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import typing
from typing import Optional, Sequence

import numpy as np

from . import CONFIG_SCHEMA_VERSION, __version__
from . import data, experiment, meta
from .errors import CmfdError, NumericError, ProtocolError
from .graph import PRESETS, TopologySpec, spectral_summary

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_RUN_COMMANDS = {"meta": "meta", "cmfd": "cmfd", "paramavg": "param_avg", "toy": "toy"}
# the toy subcommand also takes short spellings of its three fields
_TOY_ALIASES = {"toy_init": "--init", "toy_scheme": "--scheme", "toy_steps": "--steps"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _field_type(f: dataclasses.Field):
    hints = typing.get_type_hints(experiment.ExperimentConfig)
    hint = hints[f.name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return args[0] if args else hint


def _add_config_flags(p: argparse.ArgumentParser, toy: bool = False) -> None:
    p.add_argument("--config", help="JSON config file; flags given here override it")
    p.add_argument("--out", default=None, help="output directory (default: runs/<algorithm>)")
    for f in dataclasses.fields(experiment.ExperimentConfig):
        if f.name == "algorithm":
            continue
        flags = ["--" + f.name.replace("_", "-")]
        if toy and f.name in _TOY_ALIASES:
            flags.append(_TOY_ALIASES[f.name])
        kind = _field_type(f)
        if kind is bool:
            p.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS)
        else:
            p.add_argument(*flags, dest=f.name, type=kind, default=argparse.SUPPRESS)


def _add_topology_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ring", nargs=2, type=int, metavar=("N", "K"))
    g.add_argument("--ba", nargs=2, type=int, metavar=("N", "M"))
    g.add_argument("--complete", type=int, metavar="N")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0, help="BA generator seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmfdsim", description="Decentralized federated learning simulator.")
    parser.add_argument("--version", action="store_true", help="print version and config schema")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("topology", help="spectral summary of a graph")
    _add_topology_flags(p)

    p = sub.add_parser("bounds", help="convergence-bound constants for a graph")
    _add_topology_flags(p)
    p.add_argument("--eps", type=float, default=None, help="sharing rate (default 1/(2 max degree))")
    p.add_argument("--eta", type=float, required=True, help="first (or constant) learning rate")
    p.add_argument("--lm", type=float, required=True, help="subgradient bound L_m")
    p.add_argument("--c1", type=float, default=math.nan)
    p.add_argument("--decaying", action="store_true", help="omit the constant-rate limit")

    for name in _RUN_COMMANDS:
        p = sub.add_parser(name, help=f"run the {_RUN_COMMANDS[name]} algorithm")
        _add_config_flags(p, toy=name == "toy")
        if name == "meta":
            p.add_argument("--dump-functions", action="store_true",
                           help="also write each device's final function as CSV")

    p = sub.add_parser("data", help="build a dataset split and write its manifest")
    _add_config_flags(p)
    p.add_argument("--check-idx", nargs="+", metavar="PATH", help="only validate IDX files")
    return parser


def _spec_from_args(args) -> TopologySpec:
    if args.preset:
        return PRESETS[args.preset]
    if args.ring:
        return TopologySpec("ring", args.ring[0], k=args.ring[1])
    if args.ba:
        return TopologySpec("ba", args.ba[0], m=args.ba[1], seed=args.seed)
    return TopologySpec("complete", args.complete)


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _cmd_topology(args) -> int:
    topo = _spec_from_args(args).build()
    out = spectral_summary(topo).to_dict()
    out["average_degree"] = topo.average_degree
    out["edges"] = len(topo.edges())
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _cmd_bounds(args) -> int:
    topo = _spec_from_args(args).build()
    s = spectral_summary(topo)
    eps = s.eps_max if args.eps is None else args.eps
    if not s.eps_valid(eps):
        print(f"warning: eps={eps} exceeds 1/(2 max degree) = {s.eps_max}", file=sys.stderr)
    report = meta.bound_constants(args.lm, s.kappa2(eps), eps, s.lambda2, topo.n, args.eta,
                                  c1=args.c1, constant_eta=not args.decaying)
    print(json.dumps(_jsonable({**report.to_dict(), "n": topo.n, "eps": eps, "eta": args.eta,
                                "lambda2": s.lambda2}), indent=2))
    return EXIT_OK


def _config_from_args(args, algorithm: str) -> experiment.ExperimentConfig:
    base = {}
    if args.config:
        base = experiment.ExperimentConfig.from_json_file(args.config).to_dict()
    names = {f.name for f in dataclasses.fields(experiment.ExperimentConfig)}
    base.update({k: v for k, v in vars(args).items() if k in names})
    base["algorithm"] = algorithm
    return experiment.ExperimentConfig.from_dict(base)


def _print_summary(summary: dict) -> None:
    width = max(len(k) for k in summary)
    for key in sorted(summary):
        val = summary[key]
        if isinstance(val, float):
            val = f"{val:.6g}"
        elif isinstance(val, (dict, list)):
            val = json.dumps(_jsonable(val))
        print(f"{key:<{width}}  {val}")


def _cmd_run(args, algorithm: str) -> int:
    cfg = _config_from_args(args, algorithm)
    out = args.out or os.path.join("runs", algorithm)
    result = experiment.run_logged(cfg, out)
    if getattr(args, "dump_functions", False):
        experiment.dump_functions(result, os.path.join(out, "functions"))
    _print_summary(result.summary)
    print(f"outputs written to {out}")
    return EXIT_OK


def _cmd_data(args) -> int:
    if args.check_idx:
        for path in args.check_idx:
            arr = data.read_idx(path)
            print(f"{path}: ok, shape {tuple(arr.shape)}")
        return EXIT_OK
    cfg = _config_from_args(args, "cmfd")
    parts, public, test = experiment.build_data(cfg)
    out = args.out or os.path.join("runs", "data")
    os.makedirs(out, exist_ok=True)
    rule = "ring" if cfg.partition == "ring" else "random_pairs"
    man = json.loads(data.manifest(cfg.dataset, cfg.seeds(), cfg.per_device, rule,
                                   classes=[sorted(p.classes()) for p in parts],
                                   public_size=len(public), test_size=len(test)))
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    arrays = {"public": public.inputs, "test_x": test.inputs, "test_y": test.labels}
    for i, p in enumerate(parts):
        arrays[f"device{i}_x"] = p.inputs
        arrays[f"device{i}_y"] = p.labels
    np.savez(os.path.join(out, "dataset.npz"), **arrays)
    for i, p in enumerate(parts):
        print(f"device {i:>3}  classes {sorted(p.classes())}  examples {len(p)}")
    print(f"public {len(public)}  test {len(test)}  -> {out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    if args.version:
        print(f"cmfdsim {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "topology":
            return _cmd_topology(args)
        if args.command == "bounds":
            return _cmd_bounds(args)
        if args.command == "data":
            return _cmd_data(args)
        return _cmd_run(args, _RUN_COMMANDS[args.command])
    except (NumericError, ProtocolError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CmfdError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

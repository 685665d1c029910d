"""Command-line surface: train, eval, analyze, gen-data, selftest.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Errors go
to stderr with an ``error:`` prefix.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import sup_vs_expectation, squared_disagreement_divergence
from .datasets import load_dataset, make_shifted_blobs, make_two_moons, save_dataset
from .errors import ConfigError
from .experiment import run_experiment
from .networks import build_toy_network, load_checkpoint
from .training import evaluate
from .uncertainty import load_ensemble
from . import selftest as selftest_mod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    if path.endswith(".toml"):
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    out_dir = args.out or cfg.get("out") or "runs/" + cfg.get("run_name", "run")
    result = run_experiment(
        cfg, out_dir, cli_seed=args.seed, threads=args.threads, include_wall=args.timings
    )
    summary = result.summary
    print(f"run directory: {result.out_dir}")
    for model in ("source_only", "muda"):
        entry = summary[model]
        src = entry.get("source_accuracy")
        tgt = entry.get("target_accuracy")
        src_s = f"{src:.4f}" if src is not None else "n/a"
        tgt_s = f"{tgt:.4f}" if tgt is not None else "n/a"
        print(f"{model}: source accuracy {src_s}, target accuracy {tgt_s}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    accuracy, per_class = evaluate(net, data)
    doc = {
        "accuracy": accuracy,
        "per_class": [None if np.isnan(v) else v for v in per_class],
        "n": data.n,
        "domain": data.domain_id,
    }
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    ensemble = load_ensemble(args.ensemble)
    report = sup_vs_expectation(ensemble)
    sqd = squared_disagreement_divergence(ensemble)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sup", "exp", "std", "squared_divergence"])
        writer.writerow([repr(report.supremum), repr(report.expectation), repr(report.std), repr(sqd)])
    print(
        f"M={ensemble.m} N={ensemble.n} K={ensemble.k} "
        f"sup={report.supremum:.6f} exp={report.expectation:.6f} std={report.std:.6f}"
    )
    return EXIT_OK


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    seed_src = int(np.random.SeedSequence(args.seed, spawn_key=(0,)).generate_state(1)[0])
    seed_tgt = int(np.random.SeedSequence(args.seed, spawn_key=(1,)).generate_state(1)[0])
    if args.kind == "moons":
        source = make_two_moons(args.n, args.noise, 0.0, seed_src)
        target = make_two_moons(args.n, args.noise, args.rotation, seed_tgt)
    elif args.kind == "blobs":
        shift = [float(v) for v in args.shift.split(",")]
        source, target = make_shifted_blobs(args.n, args.k, shift, seed_src)
    else:
        raise ConfigError(f"unknown data kind {args.kind!r}")
    save_dataset(source, os.path.join(args.out, "source.mds"))
    save_dataset(target, os.path.join(args.out, "target.mds"))
    with open(os.path.join(args.out, "gen-args.json"), "w", encoding="utf-8") as fh:
        json.dump(vars(args) | {"command": "gen-data"}, fh, sort_keys=True, indent=2, default=str)
    print(f"wrote {args.out}/source.mds and {args.out}/target.mds")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return selftest_mod.run(verbose=not args.quiet)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="muda",
        description="Domain adaptation by minimizing model uncertainty on unlabeled target data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a full experiment from a config file")
    p_train.add_argument("--config", required=True, help="JSON or TOML experiment config")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="run directory")
    p_train.add_argument("--threads", type=int, default=1,
                         help="worker threads for stochastic sampling passes")
    p_train.add_argument("--timings", action="store_true",
                         help="write measured wall times into metrics CSVs "
                              "(forfeits byte-reproducibility)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset dump")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_an = sub.add_parser("analyze", help="disagreement report for an ensemble dump")
    p_an.add_argument("--ensemble", required=True)
    p_an.add_argument("--out", required=True, help="report CSV path")
    p_an.set_defaults(func=cmd_analyze)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic source/target pair")
    p_gen.add_argument("--kind", required=True, choices=["moons", "blobs"])
    p_gen.add_argument("--n", type=int, default=1000)
    p_gen.add_argument("--noise", type=float, default=0.1, help="moons noise std")
    p_gen.add_argument("--rotation", type=float, default=30.0, help="moons target rotation (deg)")
    p_gen.add_argument("--k", type=int, default=3, help="blobs cluster count")
    p_gen.add_argument("--shift", default="1.5,1.5", help="blobs shift vector, comma-separated")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_data)

    p_self = sub.add_parser("selftest", help="run gradient, identity, and invariant checks")
    p_self.add_argument("--quiet", action="store_true")
    p_self.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

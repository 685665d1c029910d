"""End-to-end experiment runs: config resolution, training, artifacts.

A run trains two models from one shared pretraining phase: a source-only
baseline that continues the same alternating loop with the divergence
term disabled, and the adapted model with it enabled. Both see identical
random streams, so the only difference between them is the divergence
term itself.

Run directory layout:
    config.json            resolved config (re-runnable as-is)
    pretrain/metrics.csv
    source_only/metrics.csv, checkpoint.json
    muda/metrics.csv, checkpoint.json, divergence.csv, ensemble.mce
    summary.json           accuracies side by side, config hash, timings

All CSVs are byte-reproducible for a fixed config and seed; wall times
live in summary.json, which is not.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .analysis import DivergenceTracker
from .datasets import (
    DomainDataset,
    load_dataset,
    make_shifted_blobs,
    make_two_moons,
    source_combine,
    split,
    standardize,
)
from .errors import ConfigError
from .networks import Network, NetworkSpec, build_network, save_checkpoint, toy_network_spec
from .training import (
    STREAM_DATA,
    STREAM_TRACK,
    RunLog,
    TrainConfig,
    adapt,
    evaluate,
    pretrain,
)
from .uncertainty import mc_sample, save_ensemble

_TRAIN_KEYS = {
    "pretrain_epochs", "adapt_epochs", "m", "rho_f", "rho_c", "lr", "weight_decay",
    "optimizer", "beta1", "beta2", "adam_eps", "momentum", "batch_size_source",
    "batch_size_target", "seed", "divergence_norm", "lambda_div", "stop",
}
_DATA_KEYS_COMMON = {"kind", "seed", "standardize"}
_DATA_KEYS = {
    "moons": _DATA_KEYS_COMMON | {"n", "noise_std", "rotation_deg", "train_fraction"},
    "blobs": _DATA_KEYS_COMMON | {"n", "k", "shift", "cluster_std", "train_fraction"},
    "files": _DATA_KEYS_COMMON | {"source", "target", "target_eval"},
}
_NETWORK_KEYS = {"preset", "input_dim", "num_classes", "feature_layers", "classifier_layers"}
_TOP_KEYS = {"run_name", "out", "data", "network", "train"}


def _reject_unknown(section: dict, allowed: set, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def validate_config(raw: dict) -> dict:
    """Validate an experiment config dict; returns it with defaults filled."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table/object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    cfg = copy.deepcopy(raw)
    cfg.setdefault("run_name", "run")

    data = cfg.get("data")
    if not isinstance(data, dict):
        raise ConfigError("data: section missing or not a table")
    kind = data.get("kind")
    if kind not in _DATA_KEYS:
        raise ConfigError(f"data.kind: expected one of {sorted(_DATA_KEYS)}, got {kind!r}")
    _reject_unknown(data, _DATA_KEYS[kind], "data")
    if kind == "files" and ("source" not in data or "target" not in data):
        raise ConfigError("data: 'files' kind requires source and target paths")

    network = cfg.get("network")
    if not isinstance(network, dict):
        raise ConfigError("network: section missing or not a table")
    _reject_unknown(network, _NETWORK_KEYS, "network")
    if "preset" in network and network["preset"] != "toy":
        raise ConfigError(f"network.preset: unknown preset {network['preset']!r}")
    if "preset" not in network and "feature_layers" not in network:
        raise ConfigError("network: needs either a preset or explicit layer lists")

    train = cfg.get("train")
    if not isinstance(train, dict):
        raise ConfigError("train: section missing or not a table")
    _reject_unknown(train, _TRAIN_KEYS, "train")
    # Construct early so invalid values fail at validation time with
    # a config error rather than mid-run.
    _train_config(cfg)
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"])
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc


def resolve_seed(cfg: dict, cli_seed: int | None) -> int:
    """Seed precedence: CLI flag, config, MUDA_SEED env, then 0."""
    if cli_seed is not None:
        return cli_seed
    if "seed" in cfg.get("train", {}):
        return int(cfg["train"]["seed"])
    env = os.environ.get("MUDA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"MUDA_SEED must be an integer, got {env!r}") from exc
    return 0


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _data_seed(data_cfg: dict, train_seed: int, slot: int) -> int:
    base = data_cfg.get("seed", train_seed)
    return int(np.random.SeedSequence(base, spawn_key=(STREAM_DATA, slot)).generate_state(1)[0])


@dataclass
class ExperimentData:
    source_train: DomainDataset
    source_eval: DomainDataset | None
    target_train: DomainDataset        # labels stripped
    target_eval: DomainDataset | None


def build_datasets(data_cfg: dict, train_seed: int) -> ExperimentData:
    kind = data_cfg["kind"]
    if kind == "moons":
        n = int(data_cfg.get("n", 1000))
        noise = float(data_cfg.get("noise_std", 0.1))
        rotation = float(data_cfg.get("rotation_deg", 30.0))
        frac = float(data_cfg.get("train_fraction", 0.5))
        source = make_two_moons(n, noise, 0.0, _data_seed(data_cfg, train_seed, 0))
        target = make_two_moons(n, noise, rotation, _data_seed(data_cfg, train_seed, 1))
        src_train, src_eval = split(source, [frac, 1 - frac], _data_seed(data_cfg, train_seed, 2))
        tgt_train, tgt_eval = split(target, [frac, 1 - frac], _data_seed(data_cfg, train_seed, 3))
    elif kind == "blobs":
        n = int(data_cfg.get("n", 1000))
        k = int(data_cfg.get("k", 3))
        shift = data_cfg.get("shift", [1.5, 1.5])
        std = float(data_cfg.get("cluster_std", 0.5))
        frac = float(data_cfg.get("train_fraction", 0.5))
        source, target = make_shifted_blobs(
            n, k, shift, _data_seed(data_cfg, train_seed, 0), cluster_std=std
        )
        src_train, src_eval = split(source, [frac, 1 - frac], _data_seed(data_cfg, train_seed, 2))
        tgt_train, tgt_eval = split(target, [frac, 1 - frac], _data_seed(data_cfg, train_seed, 3))
    else:
        paths = data_cfg["source"]
        if isinstance(paths, str):
            paths = [paths]
        src_train = source_combine([load_dataset(p) for p in paths])
        src_eval = None
        tgt_train = load_dataset(data_cfg["target"])
        tgt_eval = (
            load_dataset(data_cfg["target_eval"])
            if "target_eval" in data_cfg
            else (tgt_train if tgt_train.is_labeled else None)
        )
    if data_cfg.get("standardize", False):
        src_train, stats = standardize(src_train)
        if src_eval is not None:
            src_eval, _ = standardize(src_eval, stats)
        tgt_train, _ = standardize(tgt_train, stats)
        if tgt_eval is not None:
            tgt_eval, _ = standardize(tgt_eval, stats)
    return ExperimentData(src_train, src_eval, tgt_train.without_labels(), tgt_eval)


def build_spec(network_cfg: dict) -> NetworkSpec:
    if network_cfg.get("preset") == "toy":
        return toy_network_spec()
    return NetworkSpec(
        input_dim=network_cfg["input_dim"],
        num_classes=network_cfg["num_classes"],
        feature_layers=network_cfg["feature_layers"],
        classifier_layers=network_cfg["classifier_layers"],
    )


def toy_experiment_config(seed: int = 0) -> dict:
    """The calibrated two-interleaved-moons benchmark configuration.

    30-degree domain rotation, 1000 samples per domain with a 500/500
    train/test split, the five-layer width-15 network with dropout 0.5
    after the fourth layer, and minibatch 128. The divergence weight and
    epoch budget were calibrated on this task.
    """
    return {
        "run_name": "moons30",
        "data": {
            "kind": "moons",
            "n": 1000,
            "noise_std": 0.1,
            "rotation_deg": 30.0,
            "train_fraction": 0.5,
        },
        "network": {"preset": "toy"},
        "train": {
            "pretrain_epochs": 150,
            "adapt_epochs": 800,
            "m": 8,
            "rho_f": 0.5,
            "rho_c": 0.0,
            "lr": 2e-4,
            "weight_decay": 5e-4,
            "optimizer": "adam",
            "batch_size_source": 128,
            "batch_size_target": 128,
            "seed": seed,
            "lambda_div": 5.0,
        },
    }


@dataclass
class ExperimentResult:
    out_dir: str
    pretrain_log: RunLog
    baseline_log: RunLog
    muda_log: RunLog
    baseline_net: Network
    muda_net: Network
    summary: dict


def run_experiment(
    cfg: dict,
    out_dir,
    *,
    cli_seed: int | None = None,
    threads: int = 1,
    include_wall: bool = False,
) -> ExperimentResult:
    """Train the source-only baseline and the adapted model, write artifacts."""
    cfg = validate_config(cfg)
    seed = resolve_seed(cfg, cli_seed)
    cfg["train"]["seed"] = seed
    train_cfg = _train_config(cfg)
    data = build_datasets(cfg["data"], seed)
    spec = build_spec(cfg["network"])

    out_dir = str(out_dir)
    for sub in ("pretrain", "source_only", "muda"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)

    net = build_network(spec, seed=seed)
    pre_log = pretrain(
        net, data.source_train, train_cfg,
        eval_source=data.source_eval, eval_target=data.target_eval,
    )
    pre_log.write_metrics_csv(
        os.path.join(out_dir, "pretrain", "metrics.csv"), include_wall=include_wall
    )

    baseline_net = copy.deepcopy(net)
    baseline_log = adapt(
        baseline_net, data.source_train, data.target_train, train_cfg,
        eval_source=data.source_eval, eval_target=data.target_eval,
        divergence_enabled=False, threads=threads,
    )
    baseline_log.write_metrics_csv(
        os.path.join(out_dir, "source_only", "metrics.csv"), include_wall=include_wall
    )
    save_checkpoint(baseline_net, os.path.join(out_dir, "source_only", "checkpoint.json"))

    muda_net = copy.deepcopy(net)
    track_batch = (data.target_eval or data.target_train).inputs[: train_cfg.batch_size_target]
    tracker = DivergenceTracker(
        track_batch, train_cfg.m, np.random.SeedSequence(seed, spawn_key=(STREAM_TRACK,))
    )
    muda_log = adapt(
        muda_net, data.source_train, data.target_train, train_cfg,
        eval_source=data.source_eval, eval_target=data.target_eval,
        epoch_callbacks=[tracker], divergence_enabled=True, threads=threads,
    )
    muda_log.write_metrics_csv(
        os.path.join(out_dir, "muda", "metrics.csv"), include_wall=include_wall
    )
    save_checkpoint(muda_net, os.path.join(out_dir, "muda", "checkpoint.json"))
    if tracker.reports:
        tracker.write_csv(os.path.join(out_dir, "muda", "divergence.csv"))
    final_ensemble = mc_sample(
        muda_net, track_batch, train_cfg.m,
        np.random.SeedSequence(seed, spawn_key=(STREAM_TRACK, 2**31)),
    )
    save_ensemble(final_ensemble, os.path.join(out_dir, "muda", "ensemble.mce"))

    summary = _summarize(cfg, seed, data, pre_log, baseline_log, muda_log, baseline_net, muda_net)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return ExperimentResult(
        out_dir=out_dir,
        pretrain_log=pre_log,
        baseline_log=baseline_log,
        muda_log=muda_log,
        baseline_net=baseline_net,
        muda_net=muda_net,
        summary=summary,
    )


def _model_summary(net: Network, data: ExperimentData) -> dict:
    out: dict = {}
    if data.source_eval is not None:
        acc, per_class = evaluate(net, data.source_eval)
        out["source_accuracy"] = acc
        out["source_per_class"] = [None if np.isnan(v) else v for v in per_class]
    if data.target_eval is not None:
        acc, per_class = evaluate(net, data.target_eval)
        out["target_accuracy"] = acc
        out["target_per_class"] = [None if np.isnan(v) else v for v in per_class]
    return out


def _summarize(cfg, seed, data, pre_log, baseline_log, muda_log, baseline_net, muda_net) -> dict:
    div_series = muda_log.series("l_div")
    return {
        "run_name": cfg["run_name"],
        "seed": seed,
        "config_hash": config_hash(cfg),
        "source_only": _model_summary(baseline_net, data),
        "muda": _model_summary(muda_net, data),
        "l_div_first_epoch": div_series[0] if div_series else None,
        "l_div_last_epoch": div_series[-1] if div_series else None,
        "epochs_run": {
            "pretrain": len(pre_log.records),
            "source_only": len(baseline_log.records),
            "muda": len(muda_log.records),
        },
        "wall_ms": {
            "pretrain": pre_log.total_wall_ms(),
            "source_only": baseline_log.total_wall_ms(),
            "muda": muda_log.total_wall_ms(),
        },
        "warnings": pre_log.warnings + baseline_log.warnings + muda_log.warnings,
    }

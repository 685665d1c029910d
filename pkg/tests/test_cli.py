import json
import os
import subprocess
import sys

import numpy as np
import pytest

from muda.datasets import load_dataset
from muda.experiment import run_experiment, toy_experiment_config, validate_config
from muda.errors import ConfigError
from muda.uncertainty import load_ensemble


def tiny_config(seed=0):
    return {
        "run_name": "tiny",
        "data": {"kind": "moons", "n": 80, "noise_std": 0.1, "rotation_deg": 30.0,
                 "train_fraction": 0.5},
        "network": {"preset": "toy"},
        "train": {"pretrain_epochs": 2, "adapt_epochs": 3, "m": 2, "rho_f": 0.5,
                  "rho_c": 0.0, "lr": 1e-3, "weight_decay": 5e-4,
                  "batch_size_source": 40, "batch_size_target": 40, "seed": seed},
    }


def run_cli(*args, env_extra=None):
    env = os.environ.copy()
    env.pop("MUDA_SEED", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "muda", *args],
        capture_output=True, text=True, env=env,
    )


class TestValidateConfig:
    def test_unknown_top_level_key(self):
        cfg = tiny_config()
        cfg["extra"] = 1
        with pytest.raises(ConfigError, match="config.extra: unknown key"):
            validate_config(cfg)

    def test_unknown_data_key_reports_path(self):
        cfg = tiny_config()
        cfg["data"]["rotation"] = 30
        with pytest.raises(ConfigError, match="data.rotation: unknown key"):
            validate_config(cfg)

    def test_invalid_dropout_rate_rejected(self):
        cfg = tiny_config()
        cfg["train"]["rho_f"] = 1.2
        with pytest.raises(ConfigError, match="rho_f"):
            validate_config(cfg)

    def test_unknown_train_key(self):
        cfg = tiny_config()
        cfg["train"]["learning_rate"] = 0.1
        with pytest.raises(ConfigError, match="train.learning_rate"):
            validate_config(cfg)

    def test_toy_experiment_config_is_valid(self):
        validate_config(toy_experiment_config())


class TestRunExperiment:
    def test_artifacts_written(self, tmp_path):
        result = run_experiment(tiny_config(), tmp_path / "run")
        base = tmp_path / "run"
        for rel in (
            "config.json", "summary.json", "pretrain/metrics.csv",
            "source_only/metrics.csv", "source_only/checkpoint.json",
            "muda/metrics.csv", "muda/checkpoint.json", "muda/divergence.csv",
            "muda/ensemble.mce",
        ):
            assert (base / rel).exists(), rel
        summary = json.loads((base / "summary.json").read_text())
        assert "source_accuracy" in summary["source_only"]
        assert "target_accuracy" in summary["muda"]
        assert summary["config_hash"]
        load_ensemble(base / "muda" / "ensemble.mce")
        assert len(result.muda_log.records) == 3

    def test_echoed_config_reruns_identically(self, tmp_path):
        run_experiment(tiny_config(), tmp_path / "a")
        echoed = json.loads((tmp_path / "a" / "config.json").read_text())
        run_experiment(echoed, tmp_path / "b")
        for rel in ("pretrain/metrics.csv", "source_only/metrics.csv", "muda/metrics.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_smoke_run_finishes_quickly(self, tmp_path):
        import time

        cfg = tiny_config()
        cfg["train"]["pretrain_epochs"] = 5
        cfg["train"]["adapt_epochs"] = 5
        t0 = time.perf_counter()
        run_experiment(cfg, tmp_path / "smoke")
        assert time.perf_counter() - t0 < 30.0

    def test_cli_seed_overrides_config(self, tmp_path):
        r1 = run_experiment(tiny_config(seed=0), tmp_path / "a", cli_seed=9)
        r2 = run_experiment(tiny_config(seed=5), tmp_path / "b", cli_seed=9)
        assert r1.summary["seed"] == r2.summary["seed"] == 9
        assert (tmp_path / "a" / "muda" / "metrics.csv").read_bytes() == \
               (tmp_path / "b" / "muda" / "metrics.csv").read_bytes()


class TestCliTrain:
    def test_train_runs_and_is_byte_deterministic(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config()))
        outs = []
        for name in ("r1", "r2"):
            proc = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / name))
            assert proc.returncode == 0, proc.stderr
            outs.append((tmp_path / name / "muda" / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_config_exits_2(self, tmp_path):
        proc = run_cli("train", "--config", str(tmp_path / "absent.json"))
        assert proc.returncode == 2
        assert proc.stderr.startswith("error:")

    def test_invalid_rate_exits_2(self, tmp_path):
        cfg = tiny_config()
        cfg["train"]["rho_f"] = 1.2
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        proc = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / "out"))
        assert proc.returncode == 2
        assert proc.stderr.startswith("error:")

    def test_toml_config(self, tmp_path):
        cfg_path = tmp_path / "cfg.toml"
        cfg_path.write_text(
            'run_name = "tiny"\n'
            "[data]\nkind = \"moons\"\nn = 80\nnoise_std = 0.1\n"
            "rotation_deg = 30.0\ntrain_fraction = 0.5\n"
            "[network]\npreset = \"toy\"\n"
            "[train]\npretrain_epochs = 1\nadapt_epochs = 1\nm = 2\n"
            "rho_f = 0.5\nrho_c = 0.0\nbatch_size_source = 40\n"
            "batch_size_target = 40\nseed = 0\n"
        )
        proc = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / "out"))
        assert proc.returncode == 0, proc.stderr

    def test_muda_seed_env_fallback(self, tmp_path):
        cfg = tiny_config()
        del cfg["train"]["seed"]
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        proc = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / "out"),
                       env_extra={"MUDA_SEED": "17"})
        assert proc.returncode == 0, proc.stderr
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["seed"] == 17


class TestCliOther:
    def test_gen_data_and_eval_round_trip(self, tmp_path):
        proc = run_cli("gen-data", "--kind", "moons", "--n", "80", "--rotation", "30",
                       "--seed", "3", "--out", str(tmp_path / "data"))
        assert proc.returncode == 0, proc.stderr
        source = load_dataset(tmp_path / "data" / "source.mds")
        target = load_dataset(tmp_path / "data" / "target.mds")
        assert source.n == 80 and target.n == 80 and source.is_labeled

        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config()))
        proc = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / "run"))
        assert proc.returncode == 0, proc.stderr
        proc = run_cli("eval", "--ckpt", str(tmp_path / "run" / "muda" / "checkpoint.json"),
                       "--data", str(tmp_path / "data" / "target.mds"))
        assert proc.returncode == 0, proc.stderr
        doc = json.loads(proc.stdout)
        assert 0.0 <= doc["accuracy"] <= 1.0 and doc["n"] == 80

    def test_gen_data_blobs(self, tmp_path):
        proc = run_cli("gen-data", "--kind", "blobs", "--n", "60", "--k", "3",
                       "--shift", "1.0,-1.0", "--seed", "2", "--out", str(tmp_path / "b"))
        assert proc.returncode == 0, proc.stderr
        source = load_dataset(tmp_path / "b" / "source.mds")
        assert source.k == 3

    def test_analyze_report(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config()))
        proc = run_cli("train", "--config", str(cfg_path), "--out", str(tmp_path / "run"))
        assert proc.returncode == 0, proc.stderr
        report = tmp_path / "report.csv"
        proc = run_cli("analyze", "--ensemble", str(tmp_path / "run" / "muda" / "ensemble.mce"),
                       "--out", str(report))
        assert proc.returncode == 0, proc.stderr
        lines = report.read_text().strip().split("\n")
        assert lines[0] == "sup,exp,std,squared_divergence"
        values = [float(v) for v in lines[1].split(",")]
        assert values[0] >= values[1]

    def test_selftest_exits_zero_and_prints_max_error(self):
        proc = run_cli("selftest")
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert "max gradient-check error" in proc.stdout

    def test_version_flag(self):
        proc = run_cli("--version")
        assert proc.returncode == 0

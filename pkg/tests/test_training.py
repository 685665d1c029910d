import copy

import numpy as np
import pytest

from muda.datasets import DomainDataset, make_two_moons, split
from muda.errors import ConfigError, ValidationError
from muda.layers import Dense
from muda.networks import build_toy_network
from muda.training import TrainConfig, adapt, evaluate, pretrain


def moons_data(seed=0, n=200):
    src = make_two_moons(n, 0.1, 0.0, seed)
    tgt = make_two_moons(n, 0.1, 30.0, seed + 1)
    src_tr, src_te = split(src, [0.5, 0.5], seed + 2)
    tgt_tr, tgt_te = split(tgt, [0.5, 0.5], seed + 3)
    return src_tr, src_te, tgt_tr.without_labels(), tgt_te


def small_config(**overrides):
    base = dict(
        pretrain_epochs=5, adapt_epochs=5, m=4, rho_f=0.5, rho_c=0.0,
        lr=1e-3, weight_decay=5e-4, batch_size_source=64, batch_size_target=64,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def params_snapshot(net):
    return [p.value.copy() for p in net.parameters("all")]


class TestTrainConfig:
    def test_invalid_rate_rejected(self):
        with pytest.raises(ConfigError):
            small_config(rho_f=1.2)

    def test_m_below_two_rejected(self):
        with pytest.raises(ConfigError):
            small_config(m=1)

    def test_bad_stop_rule_rejected(self):
        with pytest.raises(ConfigError):
            small_config(stop={"kind": "never"})


class TestPretrain:
    def test_zero_epochs_leaves_parameters(self):
        src_tr, *_ = moons_data()
        net = build_toy_network(seed=0)
        before = params_snapshot(net)
        pretrain(net, src_tr, small_config(pretrain_epochs=0))
        for b, p in zip(before, net.parameters("all")):
            np.testing.assert_array_equal(b, p.value)

    def test_seed_reproducible_final_loss(self):
        src_tr, *_ = moons_data()
        losses = []
        for _ in range(2):
            net = build_toy_network(seed=0)
            log = pretrain(net, src_tr, small_config(pretrain_epochs=3))
            losses.append(log.records[-1].l_cls)
        assert losses[0] == losses[1]

    def test_unlabeled_source_rejected(self):
        src_tr, _, tgt_tr, _ = moons_data()
        with pytest.raises(ValidationError):
            pretrain(build_toy_network(), tgt_tr, small_config())

    def test_separable_source_reaches_high_train_accuracy(self):
        # The two moons are separable; 200 epochs should fit them.
        src = make_two_moons(1000, 0.1, 0.0, seed=11)
        src_tr, _ = split(src, [0.5, 0.5], seed=12)
        net = build_toy_network(seed=11)
        pretrain(net, src_tr, small_config(pretrain_epochs=200, batch_size_source=128))
        acc, _ = evaluate(net, src_tr)
        assert acc >= 0.99


class TestAdapt:
    def test_rho_zero_reduces_to_source_only_training(self):
        # With no dropout probability the divergence term vanishes and
        # the trajectory must be bit-identical to the divergence-free
        # loop under the same seed.
        src_tr, src_te, tgt_tr, _ = moons_data()
        cfg = small_config(rho_f=0.0, rho_c=0.0, adapt_epochs=4)

        net_a = build_toy_network(seed=1)
        pretrain(net_a, src_tr, cfg)
        net_b = copy.deepcopy(net_a)

        traj_a, traj_b = [], []
        log_a = adapt(net_a, src_tr, tgt_tr, cfg, divergence_enabled=True,
                      epoch_callbacks=[lambda net, e: traj_a.append(params_snapshot(net))])
        log_b = adapt(net_b, src_tr, tgt_tr, cfg, divergence_enabled=False,
                      epoch_callbacks=[lambda net, e: traj_b.append(params_snapshot(net))])
        assert log_a.series("l_div") == [0.0] * 4
        assert log_a.warnings and "dropout" in log_a.warnings[0]
        for snap_a, snap_b in zip(traj_a, traj_b):
            for a, b in zip(snap_a, snap_b):
                np.testing.assert_array_equal(a, b)

    def test_lambda_zero_also_skips_divergence(self):
        src_tr, _, tgt_tr, _ = moons_data()
        cfg = small_config(lambda_div=0.0, adapt_epochs=2)
        net = build_toy_network(seed=1)
        pretrain(net, src_tr, cfg)
        log = adapt(net, src_tr, tgt_tr, cfg)
        assert log.series("l_div") == [0.0, 0.0]

    def test_full_run_is_pure_function_of_config_and_seed(self):
        src_tr, _, tgt_tr, _ = moons_data()
        finals = []
        for _ in range(2):
            cfg = small_config(adapt_epochs=3)
            net = build_toy_network(seed=2)
            pretrain(net, src_tr, cfg)
            log = adapt(net, src_tr, tgt_tr, cfg)
            finals.append((params_snapshot(net), log.series("l_div")))
        for a, b in zip(finals[0][0], finals[1][0]):
            np.testing.assert_array_equal(a, b)
        assert finals[0][1] == finals[1][1]

    def test_threads_do_not_change_trajectory(self):
        src_tr, _, tgt_tr, _ = moons_data()
        finals = []
        for threads in (1, 4):
            cfg = small_config(adapt_epochs=3)
            net = build_toy_network(seed=2)
            pretrain(net, src_tr, cfg)
            adapt(net, src_tr, tgt_tr, cfg, threads=threads)
            finals.append(params_snapshot(net))
        for a, b in zip(*finals):
            np.testing.assert_array_equal(a, b)

    def test_dropout_deactivated_after_adapt(self):
        src_tr, _, tgt_tr, _ = moons_data()
        cfg = small_config(adapt_epochs=1)
        net = build_toy_network(seed=0)
        pretrain(net, src_tr, cfg)
        adapt(net, src_tr, tgt_tr, cfg)
        assert all(not l.active for l in net.dropout_layers())
        x = tgt_tr.inputs[:16]
        np.testing.assert_array_equal(
            net.forward(x, mode="eval"), net.forward(x, mode="eval")
        )

    def test_no_shift_stability(self):
        # Adapting to the source itself must not erode source accuracy.
        src = make_two_moons(400, 0.1, 0.0, seed=21)
        src_tr, src_te = split(src, [0.5, 0.5], seed=22)
        cfg = small_config(pretrain_epochs=120, adapt_epochs=40,
                           batch_size_source=128, batch_size_target=128, seed=21)
        net = build_toy_network(seed=21)
        pretrain(net, src_tr, cfg)
        before, _ = evaluate(net, src_te)
        adapt(net, src_tr, src_tr.without_labels(), cfg, eval_source=src_te)
        after, _ = evaluate(net, src_te)
        assert after >= before - 0.02

    def test_empty_target_rejected(self):
        src_tr, *_ = moons_data()
        with pytest.raises((ValidationError, IndexError)):
            adapt(build_toy_network(), src_tr,
                  DomainDataset(np.zeros((0, 2)), None, "t", 2), small_config())

    def test_plateau_stop_triggers_early(self):
        src_tr, _, tgt_tr, _ = moons_data()
        # Divergence disabled: l_div is constant 0, so the plateau rule
        # fires as soon as two windows exist.
        cfg = small_config(adapt_epochs=50, stop={"kind": "plateau", "window": 3, "tol": 1e-3})
        net = build_toy_network(seed=0)
        pretrain(net, src_tr, cfg)
        log = adapt(net, src_tr, tgt_tr, cfg, divergence_enabled=False)
        assert len(log.records) == 6


class TestEvaluate:
    def test_constant_predictor_on_balanced_set(self):
        net = build_toy_network(seed=0)
        for layer in net.classifier:
            if isinstance(layer, Dense):
                layer.weight.value[...] = 0.0
                layer.bias.value[...] = 0.0
        data = make_two_moons(100, 0.1, 0.0, seed=0)
        acc, per_class = evaluate(net, data)
        assert acc == 0.5
        np.testing.assert_array_equal(per_class, [1.0, 0.0])

    def test_perfect_predictor(self):
        # Classifier that reads the sign of the second input coordinate.
        from muda.networks import NetworkSpec, build_network

        spec = NetworkSpec(
            input_dim=2, num_classes=2,
            feature_layers=[],
            classifier_layers=[{"kind": "dense", "out": 2}, {"kind": "softmax"}],
        )
        net = build_network(spec, seed=0)
        dense = net.classifier[0]
        dense.weight.value[...] = np.array([[0.0, 0.0], [-5.0, 5.0]])
        dense.bias.value[...] = 0.0
        inputs = np.array([[0.0, -1.0], [0.0, 2.0], [1.0, -3.0]])
        labels = np.array([0, 1, 0])
        acc, per_class = evaluate(net, DomainDataset(inputs, labels, "d", 2))
        assert acc == 1.0

    def test_unlabeled_rejected(self):
        data = DomainDataset(np.zeros((3, 2)), None, "d", 2)
        with pytest.raises(ValidationError):
            evaluate(build_toy_network(), data)

    def test_wall_times_recorded(self):
        src_tr, *_ = moons_data()
        net = build_toy_network(seed=0)
        log = pretrain(net, src_tr, small_config(pretrain_epochs=2))
        assert all(r.wall_ms > 0 for r in log.records)
        assert log.total_wall_ms() > 0


class TestMetricsCsv:
    def test_deterministic_bytes_by_default(self, tmp_path):
        src_tr, src_te, tgt_tr, tgt_te = moons_data()
        blobs = []
        for run in range(2):
            cfg = small_config(adapt_epochs=3)
            net = build_toy_network(seed=3)
            pretrain(net, src_tr, cfg)
            log = adapt(net, src_tr, tgt_tr, cfg, eval_source=src_te, eval_target=tgt_te)
            path = tmp_path / f"m{run}.csv"
            log.write_metrics_csv(path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]
        header = blobs[0].split(b"\n")[0]
        assert header == b"epoch,l_cls,l_div,src_acc,tgt_acc,wall_ms"

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muda.errors import DimensionError, GradCheckError, StateError, ValidationError
from muda.layers import (
    BatchNorm,
    Dense,
    Dropout,
    Parameter,
    ReLU,
    Softmax,
    cross_entropy,
    grad_check,
    one_hot,
    softmax,
)

from conftest import linear_probe_check


class TestDense:
    def test_identity_weights(self):
        layer = Dense(2, 2, weight=np.eye(2), bias=np.zeros(2))
        out = layer.forward(np.array([[3.0, 4.0]]))
        np.testing.assert_array_equal(out, [[3.0, 4.0]])

    def test_scalar_affine(self):
        layer = Dense(1, 1, weight=np.array([[2.0]]), bias=np.array([1.0]))
        out = layer.forward(np.array([[3.0]]))
        np.testing.assert_array_equal(out, [[7.0]])

    def test_gradient_matches_finite_differences(self, rng):
        layer = Dense(5, 3, weight=rng.normal(size=(5, 3)), bias=rng.normal(size=3))
        x = rng.normal(size=(4, 5))
        r = rng.normal(size=(4, 3))
        assert linear_probe_check(layer, x, r) <= 1e-4

    def test_shape_mismatch_names_both_shapes(self):
        layer = Dense(5, 3, weight=np.zeros((5, 3)), bias=np.zeros(3))
        with pytest.raises(DimensionError, match=r"\(4, 2\).*\(5, 3\)"):
            layer.forward(np.zeros((4, 2)))

    def test_no_bias_variant(self, rng):
        layer = Dense(3, 2, weight=rng.normal(size=(3, 2)))
        assert len(layer.params()) == 1
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(layer.forward(x), x @ layer.weight.value)


class TestDropout:
    def test_inactive_is_bit_identical(self, rng):
        layer = Dropout(0.5)
        layer.active = False
        x = rng.normal(size=(3, 4))
        out = layer.forward(x, rng)
        assert out is x

    def test_zero_rate_keeps_all(self):
        layer = Dropout(0.0)
        layer.active = True
        x = np.array([[1.0, 2.0, 3.0]])
        out = layer.forward(x, None)  # rate 0 draws nothing, rng unused
        np.testing.assert_array_equal(out, x)

    def test_same_seed_same_mask(self):
        layer = Dropout(0.5)
        layer.active = True
        x = np.ones((8, 8))
        out1 = layer.forward(x, np.random.default_rng(7))
        out2 = layer.forward(x, np.random.default_rng(7))
        np.testing.assert_array_equal(out1, out2)

    def test_expectation_preserved(self):
        # Inverted scaling: the mean over many masks converges to x.
        layer = Dropout(0.5)
        layer.active = True
        rng = np.random.default_rng(3)
        x = np.full((1, 20), 2.0)
        total = np.zeros_like(x)
        n = 100_000
        for _ in range(n):
            total += layer.forward(x, rng)
        np.testing.assert_allclose(total / n, x, rtol=0.02)

    def test_mask_values(self):
        layer = Dropout(0.25)
        layer.active = True
        layer.forward(np.ones((50, 50)), np.random.default_rng(0))
        mask = layer.last_mask()
        assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}

    def test_invalid_rate_rejected(self):
        from muda.errors import ConfigError
        with pytest.raises(ConfigError):
            Dropout(1.0)
        with pytest.raises(ConfigError):
            Dropout(-0.1)

    def test_active_without_rng_is_state_error(self):
        layer = Dropout(0.5)
        layer.active = True
        with pytest.raises(StateError):
            layer.forward(np.ones((2, 2)), None)

    def test_backward_applies_mask(self, rng):
        layer = Dropout(0.5)
        layer.active = True
        layer.forward(np.ones((4, 4)), rng)
        grad = layer.backward(np.ones((4, 4)))
        np.testing.assert_array_equal(grad, layer.last_mask())


class TestReLU:
    def test_forward(self):
        out = ReLU().forward(np.array([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_gradient_matches_finite_differences(self, rng):
        layer = ReLU()
        # Keep inputs away from the kink at 0.
        x = rng.normal(size=(4, 6))
        x = np.where(np.abs(x) < 0.05, 0.5, x)
        r = rng.normal(size=(4, 6))
        assert linear_probe_check(layer, x, r) <= 1e-4


class TestBatchNorm:
    def test_two_point_batch_normalizes_to_unit(self):
        layer = BatchNorm(1)
        out = layer.forward(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(out, [[-1.0], [1.0]], atol=1e-4)

    def test_running_stats_update_only_when_enabled(self, rng):
        layer = BatchNorm(3)
        x = rng.normal(size=(16, 3)) + 5.0
        layer.update_running = False
        layer.forward(x)
        np.testing.assert_array_equal(layer.running_mean, np.zeros(3))
        layer.update_running = True
        layer.forward(x)
        assert np.all(layer.running_mean != 0.0)

    def test_eval_uses_running_stats(self, rng):
        layer = BatchNorm(2)
        x = rng.normal(size=(32, 2)) * 2.0 + 1.0
        for _ in range(200):
            layer.forward(x)
        layer.training = False
        out = layer.forward(x)
        assert abs(out.mean()) < 0.1

    def test_batch_stats_gradient(self, rng):
        layer = BatchNorm(4)
        layer.update_running = False
        x = rng.normal(size=(6, 4))
        r = rng.normal(size=(6, 4))
        assert linear_probe_check(layer, x, r) <= 1e-4

    def test_frozen_stats_gradient(self, rng):
        layer = BatchNorm(4)
        layer.update_running = False
        layer.use_batch_stats = False
        layer.running_mean = rng.normal(size=4)
        layer.running_var = rng.uniform(0.5, 2.0, size=4)
        x = rng.normal(size=(6, 4))
        r = rng.normal(size=(6, 4))
        assert linear_probe_check(layer, x, r) <= 1e-4

    def test_backward_without_cache_is_state_error(self):
        layer = BatchNorm(2)
        layer.training = False
        layer.forward(np.zeros((2, 2)))
        with pytest.raises(StateError):
            layer.backward(np.ones((2, 2)))


class TestSoftmax:
    def test_symmetry(self):
        out = Softmax().forward(np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_stability_at_extreme_logits(self):
        out = Softmax().forward(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_rows_sum_to_one(self, rng):
        out = Softmax().forward(rng.normal(size=(64, 7)) * 20.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_standalone_backward_matches_finite_differences(self, rng):
        layer = Softmax()
        x = rng.normal(size=(5, 4))
        r = rng.normal(size=(5, 4))
        assert linear_probe_check(layer, x, r) <= 1e-4

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_always_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(size=(8, 5)) * 50.0
        out = softmax(x)
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        loss, _ = cross_entropy(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
        assert loss == 0.0

    def test_uniform_prediction_is_ln2(self):
        loss, _ = cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(loss, np.log(2.0), rtol=1e-12)

    def test_fused_gradient_matches_finite_differences(self, rng):
        z = Parameter(rng.normal(size=(6, 4)), "logits")
        y = one_hot(rng.integers(0, 4, size=6), 4)

        def loss_fn():
            z.zero_grad()
            loss, grad = cross_entropy(softmax(z.value), y)
            z.grad += grad
            return loss

        assert grad_check(loss_fn, [z]) <= 1e-4

    def test_non_one_hot_rejected(self):
        with pytest.raises(ValidationError):
            cross_entropy(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]))
        with pytest.raises(ValidationError):
            cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]]))

    def test_clamp_handles_zero_scores(self):
        loss, _ = cross_entropy(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(loss, -np.log(1e-12))


class TestGradCheck:
    def test_quadratic(self):
        w = Parameter(np.array([1.0, -2.0, 3.0]), "w")

        def loss_fn():
            w.zero_grad()
            w.grad += 2.0 * w.value
            return float((w.value ** 2).sum())

        assert grad_check(loss_fn, [w]) < 1e-9

    def test_constant_function(self):
        w = Parameter(np.array([1.0, 2.0]), "w")

        def loss_fn():
            w.zero_grad()
            return 5.0

        assert grad_check(loss_fn, [w]) == 0.0

    def test_nondeterministic_function_raises(self):
        w = Parameter(np.array([1.0]), "w")
        state = {"count": 0}

        def loss_fn():
            w.zero_grad()
            state["count"] += 1
            return float(state["count"])

        with pytest.raises(GradCheckError):
            grad_check(loss_fn, [w])

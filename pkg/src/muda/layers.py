"""Differentiable layer primitives with explicit forward/backward passes.

All arrays are 64-bit floats. Every layer keeps the intermediates needed
by its backward pass in ``self.cache``; a forward in eval mode stores no
cache and a subsequent backward raises ``StateError``. Gradients
accumulate into ``Parameter.grad`` (callers zero them between steps).

Backward convention: ``backward(grad_out)`` receives dL/d(output) and
returns dL/d(input), adding dL/d(parameter) into each parameter's
``grad`` buffer. The loss-side 1/N averaging lives in the loss function,
not in the layers.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, GradCheckError, StateError, ValidationError

FLOAT = np.float64


def as_tensor(data, *, name: str = "tensor") -> np.ndarray:
    """Convert to a C-contiguous float64 array, rejecting non-finite values."""
    arr = np.ascontiguousarray(data, dtype=FLOAT)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


class Parameter:
    """A trainable array paired with its gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str):
        self.value = np.ascontiguousarray(value, dtype=FLOAT)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


class Layer:
    """Base class: stateless apart from parameters and the forward cache."""

    kind = "layer"

    def __init__(self):
        self.training = True
        self.cache = None

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Parameter]:
        return []

    def _require_cache(self):
        if self.cache is None:
            raise StateError(
                f"{self.kind} backward called without a training-mode forward cache"
            )
        return self.cache

    def take_cache(self):
        """Detach and return the forward cache (for multi-pass replay)."""
        cache, self.cache = self.cache, None
        return cache

    def restore_cache(self, cache) -> None:
        self.cache = cache

    def clone_stateless(self) -> "Layer":
        """A copy sharing parameters but owning a private cache slot."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.cache = None
        return clone


class Dense(Layer):
    """Affine layer y = x @ W + b.

    The bias can be omitted; a dense layer feeding straight into batch
    normalization should omit it, since the normalization cancels any
    constant shift and the bias gradient would be identically zero.
    """

    kind = "dense"

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        *,
        weight: np.ndarray,
        bias: np.ndarray | None = None,
        name: str = "dense",
    ):
        super().__init__()
        if weight.shape != (in_dim, out_dim):
            raise DimensionError(
                f"dense '{name}' expects W {(in_dim, out_dim)}, got {weight.shape}"
            )
        if bias is not None and bias.shape != (out_dim,):
            raise DimensionError(
                f"dense '{name}' expects b {(out_dim,)}, got {bias.shape}"
            )
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(weight, f"{name}.weight")
        self.bias = Parameter(bias, f"{name}.bias") if bias is not None else None

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"dense input shape {x.shape} incompatible with weight shape "
                f"{self.weight.value.shape}"
            )
        self.cache = x if self.training else None
        out = x @ self.weight.value
        if self.bias is not None:
            out += self.bias.value
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._require_cache()
        self.weight.grad += x.T @ grad_out
        if self.bias is not None:
            self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value.T

    def params(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        mask = x > 0.0
        self.cache = mask if self.training else None
        return np.where(mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask = self._require_cache()
        return grad_out * mask


class BatchNorm(Layer):
    """Per-feature batch normalization for (N, D) inputs.

    Which statistics normalize the batch is controlled by
    ``use_batch_stats``: batch statistics during ordinary training, the
    frozen running statistics during stochastic sampling passes and at
    eval time. Running statistics update only when ``update_running`` is
    set, and backward is supported in either statistics mode as long as
    the forward ran in training mode (cache present).
    """

    kind = "batchnorm"

    def __init__(self, dim: int, *, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        super().__init__()
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim, dtype=FLOAT)
        self.running_var = np.ones(dim, dtype=FLOAT)
        self.update_running = True
        self.use_batch_stats = True

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"batchnorm({self.dim}) got input shape {x.shape}")
        batch_mode = self.training and self.use_batch_stats
        if batch_mode:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if self.update_running:
                self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
                self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            inv_std = 1.0 / np.sqrt(var + self.eps)
        else:
            mean = self.running_mean
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        x_hat = (x - mean) * inv_std
        self.cache = (x_hat, inv_std, batch_mode) if self.training else None
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_hat, inv_std, batch_mode = self._require_cache()
        self.gamma.grad += (grad_out * x_hat).sum(axis=0)
        self.beta.grad += grad_out.sum(axis=0)
        dx_hat = grad_out * self.gamma.value
        if not batch_mode:
            # Running statistics are constants: plain per-feature scaling.
            return dx_hat * inv_std
        # Batch-statistics backward: both mean and variance depend on x.
        n = grad_out.shape[0]
        return (inv_std / n) * (
            n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0)
        )

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def stats(self) -> dict:
        return {"running_mean": self.running_mean.copy(), "running_var": self.running_var.copy()}

    def load_stats(self, stats: dict) -> None:
        self.running_mean = np.asarray(stats["running_mean"], dtype=FLOAT).copy()
        self.running_var = np.asarray(stats["running_var"], dtype=FLOAT).copy()


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time.

    ``active`` gates the stochastic behavior independently of
    ``training`` so that sampling passes can toggle dropout without
    touching the rest of the network. Inactive dropout returns its input
    unchanged (bit-identical). A rate of exactly 0 keeps all units and
    draws nothing from the RNG stream.
    """

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        self.set_rate(rate)
        self.active = False

    def set_rate(self, rate: float) -> None:
        if not (0.0 <= rate < 1.0):
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        if not self.active or self.rate == 0.0:
            self.cache = "identity" if self.training else None
            return x
        if rng is None:
            raise StateError("active dropout requires an RNG stream")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self.cache = mask if self.training else None
        return x * mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        cache = self._require_cache()
        if isinstance(cache, str):
            return grad_out
        return grad_out * cache

    def last_mask(self):
        """The mask from the latest forward, or None for an identity pass."""
        return None if isinstance(self.cache, str) else self.cache


class Softmax(Layer):
    """Row-wise softmax with max-subtraction for stability."""

    kind = "softmax"

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        self.cache = y if self.training else None
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        # dL/dz_j = y_j * (g_j - sum_k g_k y_k)
        y = self._require_cache()
        inner = (grad_out * y).sum(axis=1, keepdims=True)
        return y * (grad_out - inner)


def softmax(x: np.ndarray) -> np.ndarray:
    """Functional stable softmax over the last axis of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValidationError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=FLOAT)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(pred: np.ndarray, labels_onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy of softmax scores against one-hot labels.

    Returns ``(loss, grad_logits)`` where ``grad_logits`` is the fused
    softmax + cross-entropy gradient ``(pred - y) / N`` with respect to
    the pre-softmax logits.
    """
    if pred.shape != labels_onehot.shape:
        raise DimensionError(f"predictions {pred.shape} vs labels {labels_onehot.shape}")
    is_binary = np.all((labels_onehot == 0.0) | (labels_onehot == 1.0))
    if not is_binary or not np.allclose(labels_onehot.sum(axis=1), 1.0, rtol=0, atol=0):
        raise ValidationError("labels must be exact one-hot rows")
    n = pred.shape[0]
    clamped = np.clip(pred, 1e-12, 1.0)
    loss = -float(np.sum(labels_onehot * np.log(clamped))) / n
    grad_logits = (pred - labels_onehot) / n
    return loss, grad_logits


def grad_check(f, params: list[Parameter], *, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f()`` must return a scalar loss and populate ``param.grad`` for
    every parameter in ``params`` (grads are zeroed here before the
    call). ``f`` must be deterministic: any dropout masks must be frozen
    inside the closure. Returns the maximum relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for p in params:
        p.zero_grad()
    loss_a = f()
    analytic = [p.grad.copy() for p in params]
    loss_b = f()
    if loss_a != loss_b:
        raise GradCheckError(
            f"function is not deterministic under the check: {loss_a} vs {loss_b}"
        )

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = ana.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    for p in params:
        p.zero_grad()
    return worst

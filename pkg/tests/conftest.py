import numpy as np
import pytest

from muda.layers import Parameter, grad_check


def linear_probe_check(layer, x, r, *, extra_params=None, rng_factory=None, step=1e-5):
    """Gradient-check a layer through the scalar probe loss sum(r * out).

    The input is wrapped as a Parameter so its gradient is checked too.
    ``rng_factory`` rebuilds an identical RNG each call for layers that
    draw randomness, keeping the probe deterministic.
    """
    x_param = Parameter(np.asarray(x, dtype=float), "probe.x")
    params = [x_param] + list(layer.params()) + list(extra_params or [])

    def loss_fn():
        for p in params:
            p.zero_grad()
        layer.training = True
        rng = rng_factory() if rng_factory is not None else None
        out = layer.forward(x_param.value, rng) if rng is not None else layer.forward(x_param.value)
        loss = float((out * r).sum())
        x_param.grad += layer.backward(r)
        return loss

    return grad_check(loss_fn, params, step=step)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

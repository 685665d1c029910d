"""Built-in verification battery: gradients, identities, invariants.

Runs the same kinds of checks as the test suite, compactly, so an
installed copy can be validated without pytest.
"""

from __future__ import annotations

import numpy as np

from .layers import cross_entropy, grad_check, one_hot, softmax
from .networks import build_toy_network
from .uncertainty import (
    mc_sample,
    pairwise_identity_check,
    smoothed_divergence_loss,
    uncertainty_loss_backward,
)


def classification_grad_error(seed: int = 0) -> float:
    """Max relative gradient error of the source loss on the toy network."""
    rng = np.random.default_rng(seed)
    net = build_toy_network(seed=seed)
    x = rng.normal(size=(8, 2))
    y = one_hot(rng.integers(0, 2, size=8), 2)
    params = net.parameters("all")

    def loss_fn():
        for p in params:
            p.zero_grad()
        scores = net.forward(x, mode="train", dropout_active=False, update_stats=False)
        loss, grad_logits = cross_entropy(scores, y)
        net.backward(grad_logits, fused_softmax=True)
        return loss

    return grad_check(loss_fn, params)


def divergence_grad_error(seed: int = 0, m: int = 4) -> float:
    """Max relative gradient error of the divergence loss, masks frozen.

    Masks are frozen by rebuilding the same seed sequence on every call,
    so each of the M passes redraws identical masks.
    """
    rng = np.random.default_rng(seed)
    net = build_toy_network(seed=seed)
    x = rng.normal(size=(6, 2))
    params = net.parameters("all")

    def loss_fn():
        for p in params:
            p.zero_grad()
        ensemble = mc_sample(
            net, x, m, np.random.SeedSequence(seed, spawn_key=(99,)), retain_caches=True
        )
        loss = smoothed_divergence_loss(ensemble.scores)
        uncertainty_loss_backward(ensemble, net)
        return loss

    return grad_check(loss_fn, params)


def identity_gap(seed: int = 0, trials: int = 10) -> float:
    """Worst gap of the ordered-pairwise vs variance identity."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(2, 33))
        n = int(rng.integers(1, 65))
        k = int(rng.integers(2, 11))
        scores = softmax(rng.normal(size=(m * n, k)) * 3.0).reshape(m, n, k)
        _, _, gap = pairwise_identity_check(scores)
        worst = max(worst, gap)
    return worst


def run(verbose: bool = True) -> int:
    cls_err = classification_grad_error()
    div_err = divergence_grad_error()
    gap = identity_gap()
    rng = np.random.default_rng(7)
    row_err = float(np.abs(softmax(rng.normal(size=(64, 5)) * 50.0).sum(axis=1) - 1.0).max())

    checks = [
        ("classification gradient vs finite differences", cls_err, 1e-4),
        ("divergence gradient vs finite differences", div_err, 1e-4),
        ("pairwise/variance identity gap", gap, 1e-9),
        ("softmax rows sum to one", row_err, 1e-12),
    ]
    failed = False
    for name, value, bound in checks:
        ok = value <= bound
        failed = failed or not ok
        if verbose:
            print(f"{'ok  ' if ok else 'FAIL'} {name}: {value:.3e} (bound {bound:.0e})")
    print(f"max gradient-check error: {max(cls_err, div_err):.3e}")
    return 1 if failed else 0

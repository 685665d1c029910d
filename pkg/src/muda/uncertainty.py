"""Stochastic-forward ensembles and the predictive-variance loss.

An ensemble is M softmax score matrices for the same batch, obtained
from M forward passes with dropout active. Its per-class variance
(biased, 1/M) measures how much the sampled classifiers disagree; the
divergence loss is the batch mean of a norm of that variance, and its
gradient flows back through each pass's own dropout masks.

Ensemble dump format (``.mce``), little-endian:
    bytes 0..3   magic b"MCE1"
    bytes 4..7   uint32 M
    bytes 8..11  uint32 N
    bytes 12..15 uint32 K
    bytes 16..23 int64 seed (-1 when unknown)
    bytes 24..   M*N*K float64, row-major [pass][sample][class]
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError, StateError, ValidationError
from .layers import FLOAT
from .networks import Network

ENSEMBLE_MAGIC = b"MCE1"

# Variance magnitudes at or below this are indistinguishable from the
# estimator's own rounding noise and are flushed to exactly zero; a
# value below -NOISE_FLOOR indicates a broken estimator.
VARIANCE_NOISE_FLOOR = 1e-15

# Smoothing added under the square root in the differentiable loss so its
# gradient stays finite at zero variance. Reported estimates use the raw
# clamped variance instead.
LOSS_SMOOTHING = 1e-12


@dataclass
class McEnsemble:
    """M stochastic softmax outputs per sample, shaped (M, N, K)."""

    scores: np.ndarray
    seed: int = -1
    pass_caches: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=FLOAT)
        if self.scores.ndim != 3:
            raise ValidationError(f"ensemble scores must be (M, N, K), got {self.scores.shape}")
        if self.m < 2:
            raise ConfigError(f"ensemble needs M >= 2 passes, got {self.m}")
        row_sums = self.scores.sum(axis=2)
        if not np.allclose(row_sums, 1.0, rtol=0, atol=1e-10):
            raise ValidationError("ensemble rows must sum to 1 within 1e-10")

    @property
    def m(self) -> int:
        return self.scores.shape[0]

    @property
    def n(self) -> int:
        return self.scores.shape[1]

    @property
    def k(self) -> int:
        return self.scores.shape[2]

    @property
    def mean(self) -> np.ndarray:
        return self.scores.mean(axis=0)


@dataclass
class UncertaintyEstimate:
    """Per-class predictive variance and the derived per-sample losses."""

    variance: np.ndarray        # (N, K), clamped to be non-negative
    per_sample_loss: np.ndarray  # (N,)
    mean_loss: float
    raw_variance: np.ndarray    # (N, K), pre-clamp (for identity checks)


def _clamp_variance(raw: np.ndarray) -> np.ndarray:
    low = raw.min() if raw.size else 0.0
    if low < 0.0:
        # The noise floor was already flushed; a surviving negative
        # exceeds what rounding can explain.
        raise ConsistencyError(
            f"variance estimate {low} is more negative than rounding can explain"
        )
    return raw


def _ensemble_variance(scores: np.ndarray) -> np.ndarray:
    """Biased per-class variance over the pass axis: E[y^2] - (E[y])^2.

    Magnitudes at or below the rounding noise floor of the one-pass
    formula are flushed to exactly zero, so a degenerate ensemble
    (identical rows) reports exactly zero variance.
    """
    mean = scores.mean(axis=0)
    raw = np.mean(scores * scores, axis=0) - mean * mean
    return np.where(np.abs(raw) <= VARIANCE_NOISE_FLOOR, 0.0, raw)


def predictive_variance(e: McEnsemble, *, norm: str = "std_l2") -> UncertaintyEstimate:
    """Estimate model uncertainty from a stochastic-forward ensemble.

    ``norm`` selects the per-sample reduction of the class-variance
    vector v: "std_l2" is the L2 norm of the element-wise standard
    deviations (= sqrt of the summed variance); "var_l2" is the L2 norm
    of the variance vector itself.
    """
    raw = _ensemble_variance(e.scores)
    var = _clamp_variance(raw)
    if norm == "std_l2":
        per_sample = np.sqrt(var.sum(axis=1))
    elif norm == "var_l2":
        per_sample = np.sqrt((var * var).sum(axis=1))
    else:
        raise ConfigError(f"unknown divergence norm {norm!r}")
    return UncertaintyEstimate(
        variance=var,
        per_sample_loss=per_sample,
        mean_loss=float(per_sample.mean()),
        raw_variance=raw,
    )


def smoothed_divergence_loss(scores: np.ndarray, *, norm: str = "std_l2") -> float:
    """The differentiable loss value matching ``uncertainty_loss_backward``.

    Identical to the reported mean loss except for the smoothing term
    under the square root.
    """
    raw = _ensemble_variance(scores)
    if norm == "std_l2":
        per_sample = np.sqrt(raw.sum(axis=1) + scores.shape[2] * LOSS_SMOOTHING)
    elif norm == "var_l2":
        per_sample = np.sqrt((raw * raw).sum(axis=1) + LOSS_SMOOTHING)
    else:
        raise ConfigError(f"unknown divergence norm {norm!r}")
    return float(per_sample.mean())


def active_dropout_rate(net: Network) -> float:
    """Total dropout probability available for stochastic sampling."""
    return float(sum(l.rate for l in net.dropout_layers()))


def mc_sample(
    net: Network,
    x: np.ndarray,
    m: int,
    seed_seq: np.random.SeedSequence,
    *,
    threads: int = 1,
    retain_caches: bool = False,
) -> McEnsemble:
    """Run M stochastic forward passes with dropout active.

    Each pass draws its masks from its own child of ``seed_seq``, so the
    result is identical whether passes run sequentially or across
    ``threads`` workers. The passes are inference-style: batch-norm
    layers normalize with their frozen running statistics (dropout is
    the only stochasticity), and dropout is left deactivated afterwards.
    With ``retain_caches`` each pass's layer caches are kept so the loss
    can be backpropagated through every pass.
    """
    if m < 2:
        raise ConfigError(f"MC sampling needs M >= 2, got {m}")
    if active_dropout_rate(net) == 0.0:
        warnings.warn(
            "network has no active dropout probability; all passes will agree "
            "and the divergence loss is identically zero",
            stacklevel=2,
        )
    children = seed_seq.spawn(m)
    n = x.shape[0]
    k = net.spec.num_classes
    scores = np.empty((m, n, k), dtype=FLOAT)
    caches: list = [None] * m

    def run_pass(idx: int, target: Network):
        rng = np.random.default_rng(children[idx])
        out = target.forward(
            x, mode="train", dropout_active=True, rng=rng,
            update_stats=False, bn_batch_stats=False,
        )
        scores[idx] = out
        if retain_caches:
            caches[idx] = target.take_caches()

    if threads <= 1:
        for idx in range(m):
            run_pass(idx, net)
    else:
        clones = [net.clone_stateless() for _ in range(m)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda idx: run_pass(idx, clones[idx]), range(m)))
    for layer in net.dropout_layers():
        layer.active = False
    entropy = seed_seq.entropy
    return McEnsemble(
        scores=scores,
        seed=int(entropy) if isinstance(entropy, int) and entropy < 2**62 else -1,
        pass_caches=caches if retain_caches else [],
    )


def uncertainty_loss_backward(
    e: McEnsemble,
    net: Network,
    *,
    norm: str = "std_l2",
    weight: float = 1.0,
) -> None:
    """Accumulate the gradient of the mean divergence loss into parameters.

    Requires the ensemble to have been sampled with ``retain_caches``.
    The gradient of the smoothed loss with respect to each pass's softmax
    output is propagated through that pass's own cached masks and
    activations; contributions from all M passes accumulate. Classifier
    parameters also receive gradient as a by-product, but only the
    feature-extractor gradient is meant to be consumed (the classifier
    update does not involve this loss).
    """
    if not e.pass_caches or any(c is None for c in e.pass_caches):
        raise StateError("ensemble was sampled without retain_caches; cannot backprop")
    scores = e.scores
    m, n, k = scores.shape
    mean = scores.mean(axis=0)
    raw = _ensemble_variance(scores)
    if not raw.any():
        # Degenerate ensemble: every pass agreed, so there is no
        # disagreement signal to follow; the gradient is exactly zero.
        return

    if norm == "std_l2":
        # loss_n = sqrt(sum_k v_nk + K*eps); dloss/dv_nk = 1 / (2 loss_n)
        smoothed = np.sqrt(raw.sum(axis=1) + k * LOSS_SMOOTHING)
        dloss_dv = 0.5 / smoothed[:, None]
    elif norm == "var_l2":
        smoothed = np.sqrt((raw * raw).sum(axis=1) + LOSS_SMOOTHING)
        dloss_dv = raw / smoothed[:, None]
    else:
        raise ConfigError(f"unknown divergence norm {norm!r}")

    # v_nk = mean_m y_mnk^2 - (mean_m y_mnk)^2
    # dv_nk/dy_mnk = (2/M) (y_mnk - mean_nk)
    for idx in range(m):
        grad_scores = weight * dloss_dv * (2.0 / m) * (scores[idx] - mean) / n
        net.restore_caches(e.pass_caches[idx])
        net.backward(grad_scores, fused_softmax=False)


def pairwise_identity_check(e) -> tuple[float, float, float]:
    """Numerically verify that mean pairwise squared difference over all
    ordered pass pairs equals twice the mean biased variance.

    Accepts an ``McEnsemble`` or a raw (M, N, K) array. Returns
    ``(lhs, rhs, gap)`` where lhs averages ||y_i - y_j||^2 over all M^2
    ordered pairs and samples, and rhs is 2x the per-sample variance
    summed over classes and averaged over samples (pre-clamp).
    """
    scores = e.scores if isinstance(e, McEnsemble) else np.asarray(e, dtype=FLOAT)
    if scores.ndim != 3:
        raise ValidationError(f"expected (M, N, K) scores, got shape {scores.shape}")
    m, n, _ = scores.shape
    diff = scores[:, None, :, :] - scores[None, :, :, :]
    lhs = float((diff * diff).sum() / (m * m * n))
    rhs = float(2.0 * _ensemble_variance(scores).sum() / n)
    return lhs, rhs, abs(lhs - rhs)


def save_ensemble(e: McEnsemble, path) -> None:
    header = ENSEMBLE_MAGIC + struct.pack("<IIIq", e.m, e.n, e.k, e.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(e.scores, dtype="<f8").tobytes())


def load_ensemble(path) -> McEnsemble:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != ENSEMBLE_MAGIC:
        raise ValidationError(f"not an ensemble dump: {path}")
    m, n, k, seed = struct.unpack("<IIIq", blob[4:24])
    expected = 24 + m * n * k * 8
    if len(blob) != expected:
        raise ValidationError(
            f"ensemble dump truncated: expected {expected} bytes, found {len(blob)}"
        )
    scores = np.frombuffer(blob, dtype="<f8", offset=24).reshape(m, n, k).astype(FLOAT)
    return McEnsemble(scores=scores, seed=seed)

"""Training loops: source pretraining and the alternating adaptation.

Adaptation interleaves two scoped updates per minibatch pair: the
classifier is updated on the source classification loss alone, then the
feature extractor is updated on the classification loss (recomputed
under the new classifier) plus the weighted divergence loss measured by
stochastic sampling on the unlabeled target minibatch. Target labels,
when present, are touched only by the evaluation helpers.

Every run is a pure function of (config, seed): all shuffling, mask
sampling, and initialization draw from fixed named substreams of the
config seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import DomainDataset
from .errors import ConfigError, ValidationError
from .layers import cross_entropy, one_hot
from .networks import Network
from .optim import make_optimizer, zero_grad
from .uncertainty import (
    active_dropout_rate,
    mc_sample,
    predictive_variance,
    uncertainty_loss_backward,
)

# Seed substream spawn keys (shared with networks.build_network, which
# uses key 0 for initialization).
STREAM_PRETRAIN = 1
STREAM_ADAPT_SOURCE = 2
STREAM_ADAPT_TARGET = 3
STREAM_MC = 4
STREAM_TRACK = 5
STREAM_DATA = 6


@dataclass
class TrainConfig:
    """Every knob of the training procedure."""

    pretrain_epochs: int = 200
    adapt_epochs: int = 300
    m: int = 8
    rho_f: float | None = None   # None keeps each dropout layer's own rate
    rho_c: float | None = None
    lr: float = 2e-4
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    batch_size_source: int = 64
    batch_size_target: int = 64
    seed: int = 0
    divergence_norm: str = "std_l2"
    lambda_div: float = 1.0
    stop: dict = field(default_factory=lambda: {"kind": "max_epochs"})

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError(f"m must be >= 2, got {self.m}")
        for name in ("rho_f", "rho_c"):
            rate = getattr(self, name)
            if rate is not None and not (0.0 <= rate < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")
        if self.batch_size_source < 1 or self.batch_size_target < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.divergence_norm not in ("std_l2", "var_l2"):
            raise ConfigError(f"divergence_norm must be 'std_l2' or 'var_l2'")
        kind = self.stop.get("kind")
        if kind not in ("max_epochs", "plateau"):
            raise ConfigError(f"stop.kind must be 'max_epochs' or 'plateau', got {kind!r}")
        if kind == "plateau":
            if int(self.stop.get("window", 0)) < 1:
                raise ConfigError("plateau stop needs a positive 'window'")
            if float(self.stop.get("tol", -1.0)) < 0:
                raise ConfigError("plateau stop needs a non-negative 'tol'")


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_div: float
    src_acc: float
    tgt_acc: float
    wall_ms: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def write_metrics_csv(self, path, *, include_wall: bool = False) -> None:
        """Write the per-epoch metrics table.

        The wall_ms column is written as 0 by default so that the file
        is byte-identical across reruns of the same config and seed;
        measured times stay available on the records and in the run
        summary. Pass ``include_wall=True`` to write real timings at the
        cost of reproducible bytes.
        """
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "l_cls", "l_div", "src_acc", "tgt_acc", "wall_ms"])
            for r in self.records:
                wall = repr(r.wall_ms) if include_wall else "0"
                writer.writerow(
                    [r.epoch, repr(r.l_cls), repr(r.l_div), repr(r.src_acc), repr(r.tgt_acc), wall]
                )

    def total_wall_ms(self) -> float:
        return float(sum(r.wall_ms for r in self.records))

    def series(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]


def evaluate(net: Network, data: DomainDataset) -> tuple[float, np.ndarray]:
    """Accuracy and per-class recall under deterministic prediction."""
    if not data.is_labeled:
        raise ValidationError(f"cannot evaluate on unlabeled domain {data.domain_id!r}")
    preds = net.predict(data.inputs)
    accuracy = float(np.mean(preds == data.labels))
    per_class = np.full(data.k, np.nan)
    for c in range(data.k):
        mask = data.labels == c
        if mask.any():
            per_class[c] = float(np.mean(preds[mask] == c))
    return accuracy, per_class


def _epoch_batches(n: int, batch_size: int, order: np.ndarray, num_batches: int):
    """Yield ``num_batches`` index batches from the permutation ``order``.

    The domain whose full pass defines the epoch (``num_batches`` equals
    its own batch count) is sliced plainly, with a short final batch if
    the batch size does not divide it. A smaller domain cycles through
    its permutation to fill the epoch.
    """
    own_batches = -(-n // batch_size)
    if num_batches == own_batches:
        for b in range(num_batches):
            yield order[b * batch_size:(b + 1) * batch_size]
    else:
        for b in range(num_batches):
            lo = b * batch_size
            yield order.take(np.arange(lo, lo + batch_size), mode="wrap")


def _accuracy_or_nan(net: Network, data: DomainDataset | None) -> float:
    if data is None or not data.is_labeled:
        return float("nan")
    return evaluate(net, data)[0]


def pretrain(
    net: Network,
    source: DomainDataset,
    cfg: TrainConfig,
    *,
    eval_source: DomainDataset | None = None,
    eval_target: DomainDataset | None = None,
) -> RunLog:
    """Supervised training of the full network on labeled source data.

    Dropout layers are active as ordinary regularization, at the rates
    installed by the config overrides (or their configured defaults).
    """
    if not source.is_labeled:
        raise ValidationError(f"pretraining requires labels on {source.domain_id!r}")
    net.set_dropout_rates(cfg.rho_f, cfg.rho_c)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(STREAM_PRETRAIN,)))
    params = net.parameters("all")
    opt = _build_optimizer(cfg, params)
    labels = one_hot(source.labels, source.k)
    log = RunLog()
    batches = max(1, -(-source.n // cfg.batch_size_source))
    for epoch in range(cfg.pretrain_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(source.n)
        losses = []
        for idx in _epoch_batches(source.n, cfg.batch_size_source, order, batches):
            zero_grad(params)
            scores = net.forward(
                source.inputs[idx], mode="train", dropout_active=True, rng=rng
            )
            loss, grad_logits = cross_entropy(scores, labels[idx])
            net.backward(grad_logits, fused_softmax=True)
            opt.step()
            losses.append(loss)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                l_cls=float(np.mean(losses)),
                l_div=0.0,
                src_acc=_accuracy_or_nan(net, eval_source),
                tgt_acc=_accuracy_or_nan(net, eval_target),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    return log


def adapt(
    net: Network,
    source: DomainDataset,
    target: DomainDataset,
    cfg: TrainConfig,
    *,
    eval_source: DomainDataset | None = None,
    eval_target: DomainDataset | None = None,
    epoch_callbacks: list | None = None,
    divergence_enabled: bool = True,
    threads: int = 1,
) -> RunLog:
    """The alternating adaptation loop.

    Per iteration: draw a source and a target minibatch; update the
    classifier on the source classification loss; recompute the
    classification loss under the new classifier and update the feature
    extractor on it plus ``lambda_div`` times the divergence loss, whose
    gradient was taken through the stochastic target passes before the
    classifier moved. With ``divergence_enabled=False`` (or zero overall
    dropout probability, or ``lambda_div == 0``) the divergence machinery
    is skipped entirely and the loop degenerates to source-only training
    with the identical update structure and random streams.
    """
    if not source.is_labeled:
        raise ValidationError(f"adaptation requires labels on {source.domain_id!r}")
    if target.n < 1:
        raise ValidationError("target domain is empty")
    net.set_dropout_rates(cfg.rho_f, cfg.rho_c)

    log = RunLog()
    divergence_on = divergence_enabled and cfg.lambda_div != 0.0
    if divergence_on and active_dropout_rate(net) == 0.0:
        log.warnings.append(
            "divergence loss disabled: no dropout probability anywhere in the network"
        )
        divergence_on = False

    src_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(STREAM_ADAPT_SOURCE,)))
    tgt_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(STREAM_ADAPT_TARGET,)))
    mc_root = np.random.SeedSequence(cfg.seed, spawn_key=(STREAM_MC,))

    params_all = net.parameters("all")
    params_f = net.parameters("F")
    params_c = net.parameters("C")
    opt_f = _build_optimizer(cfg, params_f)
    opt_c = _build_optimizer(cfg, params_c)
    labels = one_hot(source.labels, source.k)

    iters = max(
        -(-source.n // cfg.batch_size_source), -(-target.n // cfg.batch_size_target)
    )
    for epoch in range(cfg.adapt_epochs):
        t0 = time.perf_counter()
        src_order = src_rng.permutation(source.n)
        tgt_order = tgt_rng.permutation(target.n)
        src_batches = _epoch_batches(source.n, cfg.batch_size_source, src_order, iters)
        tgt_batches = _epoch_batches(target.n, cfg.batch_size_target, tgt_order, iters)
        cls_losses = []
        div_losses = []
        for src_idx, tgt_idx in zip(src_batches, tgt_batches):
            xb_s = source.inputs[src_idx]
            yb_s = labels[src_idx]

            # Classification loss under the current classifier; only the
            # classifier gradient is consumed from this pass.
            zero_grad(params_c)
            scores = net.forward(xb_s, mode="train", dropout_active=False)
            l_cls, grad_logits = cross_entropy(scores, yb_s)
            net.backward(grad_logits, fused_softmax=True, scope="C")
            c_grads = [p.grad.copy() for p in params_c]

            # Divergence loss and its feature gradient, sampled before
            # the classifier moves.
            if divergence_on:
                zero_grad(params_all)
                ensemble = mc_sample(
                    net,
                    target.inputs[tgt_idx],
                    cfg.m,
                    mc_root.spawn(1)[0],
                    threads=threads,
                    retain_caches=True,
                )
                l_div = predictive_variance(ensemble, norm=cfg.divergence_norm).mean_loss
                uncertainty_loss_backward(
                    ensemble, net, norm=cfg.divergence_norm, weight=cfg.lambda_div
                )
                f_div_grads = [p.grad.copy() for p in params_f]
            else:
                l_div = 0.0
                f_div_grads = None

            # Classifier update on the classification loss alone.
            for p, g in zip(params_c, c_grads):
                p.grad[...] = g
            opt_c.step()

            # Feature update: classification loss under the new
            # classifier, plus the divergence gradient.
            zero_grad(params_all)
            scores2 = net.forward(xb_s, mode="train", dropout_active=False, update_stats=False)
            _, grad_logits2 = cross_entropy(scores2, yb_s)
            net.backward(grad_logits2, fused_softmax=True)
            if f_div_grads is not None:
                for p, g in zip(params_f, f_div_grads):
                    p.grad += g
            opt_f.step()

            cls_losses.append(l_cls)
            div_losses.append(l_div)

        log.records.append(
            EpochRecord(
                epoch=epoch,
                l_cls=float(np.mean(cls_losses)),
                l_div=float(np.mean(div_losses)),
                src_acc=_accuracy_or_nan(net, eval_source),
                tgt_acc=_accuracy_or_nan(net, eval_target),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
        for callback in epoch_callbacks or []:
            callback(net, epoch)
        if _should_stop(cfg, log):
            break
    return log


def _build_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return make_optimizer(
            "adam", params, cfg.lr,
            weight_decay=cfg.weight_decay,
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
        )
    return make_optimizer(
        "sgd", params, cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum
    )


def _should_stop(cfg: TrainConfig, log: RunLog) -> bool:
    if cfg.stop.get("kind") != "plateau":
        return False
    window = int(cfg.stop["window"])
    if len(log.records) < 2 * window:
        return False
    series = log.series("l_div")
    recent = float(np.mean(series[-window:]))
    previous = float(np.mean(series[-2 * window:-window]))
    return abs(previous - recent) <= float(cfg.stop["tol"]) * max(abs(previous), 1e-12)

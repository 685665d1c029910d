"""Disagreement diagnostics over stochastic classifier ensembles.

Each pass of an ensemble is treated as one sampled classifier. The
supremum and expectation of the pairwise disagreement rate are computed
over all unordered pass pairs (self-pairs are excluded; they are
trivially zero and would bias the mean). The algebraic identity check in
``uncertainty`` deliberately uses all ordered pairs instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .uncertainty import McEnsemble, mc_sample


@dataclass
class DisagreementReport:
    """Pairwise disagreement statistics for one ensemble."""

    pairwise_rates: np.ndarray  # (M, M), symmetric, zero diagonal
    supremum: float
    expectation: float
    std: float


def disagreement_rate(preds_a: np.ndarray, preds_b: np.ndarray) -> float:
    """Fraction of samples on which two label vectors differ."""
    preds_a = np.asarray(preds_a)
    preds_b = np.asarray(preds_b)
    if preds_a.shape != preds_b.shape:
        raise DimensionError(f"prediction shapes differ: {preds_a.shape} vs {preds_b.shape}")
    return float(np.mean(preds_a != preds_b))


def sup_vs_expectation(e: McEnsemble) -> DisagreementReport:
    """Supremum and expectation of pairwise hard-label disagreement.

    Hard labels come from the argmax of each pass (ties to the lowest
    class index). Statistics are over the M(M-1)/2 unordered pairs.
    """
    labels = np.argmax(e.scores, axis=2)  # (M, N)
    m = labels.shape[0]
    rates = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            r = float(np.mean(labels[i] != labels[j]))
            rates[i, j] = rates[j, i] = r
    iu = np.triu_indices(m, k=1)
    pair_rates = rates[iu]
    return DisagreementReport(
        pairwise_rates=rates,
        supremum=float(pair_rates.max()),
        expectation=float(pair_rates.mean()),
        std=float(pair_rates.std()),
    )


def squared_disagreement_divergence(e: McEnsemble) -> float:
    """Twice the maximum over pass pairs of the mean squared score gap.

    The continuous analogue of the hard-label supremum: for each
    unordered pair, average ||y_i(x) - y_j(x)||^2 over the batch, take
    the max, and double it.
    """
    scores = e.scores
    m = scores.shape[0]
    worst = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            gap = scores[i] - scores[j]
            worst = max(worst, float((gap * gap).sum(axis=1).mean()))
    return 2.0 * worst


class DivergenceTracker:
    """Per-epoch disagreement reports on a fixed held-out target batch.

    Attach to the adaptation loop as an epoch callback; one report is
    recorded at the end of each epoch, each from a fresh seeded
    ensemble of ``m`` passes on the same batch.
    """

    def __init__(self, batch: np.ndarray, m: int, seed_seq: np.random.SeedSequence):
        self.batch = np.asarray(batch, dtype=float)
        self.m = m
        self.seed_seq = seed_seq
        self.reports: list[tuple[int, DisagreementReport]] = []

    def __call__(self, net, epoch: int) -> None:
        ensemble = mc_sample(net, self.batch, self.m, self.seed_seq.spawn(1)[0])
        self.reports.append((epoch, sup_vs_expectation(ensemble)))

    def expectations(self) -> list[float]:
        return [rep.expectation for _, rep in self.reports]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "sup", "exp", "std"])
            for epoch, rep in self.reports:
                writer.writerow([epoch, repr(rep.supremum), repr(rep.expectation), repr(rep.std)])


def read_divergence_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"divergence series {path} is empty")
    return [
        {"epoch": int(r["epoch"]), "sup": float(r["sup"]), "exp": float(r["exp"]), "std": float(r["std"])}
        for r in rows
    ]

"""Domain adaptation by minimizing model uncertainty on unlabeled targets.

A small numpy library: explicit-backward layers, stochastic-forward
uncertainty estimation, the alternating adaptation loop, synthetic
domain-shift benchmarks, and disagreement analysis. See README.md for
the command-line interface and file formats.
"""

__version__ = "0.1.0"

from .datasets import (
    DomainDataset,
    make_shifted_blobs,
    make_two_moons,
    read_idx,
    source_combine,
    split,
    standardize,
    write_idx,
)
from .layers import Parameter, cross_entropy, grad_check, one_hot, softmax
from .networks import (
    Network,
    NetworkSpec,
    build_network,
    build_toy_network,
    load_checkpoint,
    save_checkpoint,
    toy_network_spec,
)
from .optim import Adam, SGD, make_optimizer, zero_grad
from .training import RunLog, TrainConfig, adapt, evaluate, pretrain
from .uncertainty import (
    McEnsemble,
    UncertaintyEstimate,
    load_ensemble,
    mc_sample,
    pairwise_identity_check,
    predictive_variance,
    save_ensemble,
    uncertainty_loss_backward,
)
from .analysis import (
    DisagreementReport,
    DivergenceTracker,
    disagreement_rate,
    squared_disagreement_divergence,
    sup_vs_expectation,
)
from .experiment import run_experiment

__all__ = [
    "Adam",
    "DisagreementReport",
    "DivergenceTracker",
    "DomainDataset",
    "McEnsemble",
    "Network",
    "NetworkSpec",
    "Parameter",
    "RunLog",
    "SGD",
    "TrainConfig",
    "UncertaintyEstimate",
    "adapt",
    "build_network",
    "build_toy_network",
    "cross_entropy",
    "disagreement_rate",
    "evaluate",
    "grad_check",
    "load_checkpoint",
    "load_ensemble",
    "make_optimizer",
    "make_shifted_blobs",
    "make_two_moons",
    "mc_sample",
    "one_hot",
    "pairwise_identity_check",
    "predictive_variance",
    "pretrain",
    "read_idx",
    "run_experiment",
    "save_checkpoint",
    "save_ensemble",
    "softmax",
    "source_combine",
    "split",
    "squared_disagreement_divergence",
    "standardize",
    "sup_vs_expectation",
    "toy_network_spec",
    "uncertainty_loss_backward",
    "write_idx",
    "zero_grad",
]

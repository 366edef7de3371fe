"""Deterministic federated-learning simulator for studying label noise."""

__version__ = "0.1.0"

from .data import LabeledDataset, inject_label_noise, load_idx, partition_iid, write_idx
from .errors import (
    AssumptionViolation, ConfigError, DataError, DomainError, NoisyFedError, ParseError,
    ProtocolError, ShapeError, VerificationError,
)
from .federation import FederationConfig, aggregate_fedavg, aggregate_fednova, aggregate_scaffold, run_federation, run_round
from .grid import GridWorld, fig2_worlds, grid_world_sample
from .metrics import (
    empirical_risk, fit_accuracy_vs_noise, fit_pathnorm_growth, generalization_error, ground_truth_risk,
    lemma1_identity_check, noise_expectation_term, theorem1_bound,
)
from .nn import (
    ReluMlp, SgdConfig, backward, cross_entropy_loss, forward, init_mlp, path_norm_proxy, sgd_epochs,
)

__all__ = [
    "AssumptionViolation", "ConfigError", "DataError", "DomainError", "FederationConfig", "GridWorld",
    "LabeledDataset", "NoisyFedError", "ParseError", "ProtocolError", "ReluMlp", "SgdConfig", "ShapeError",
    "VerificationError", "aggregate_fedavg", "aggregate_fednova", "aggregate_scaffold", "backward",
    "cross_entropy_loss", "empirical_risk", "fig2_worlds", "fit_accuracy_vs_noise", "fit_pathnorm_growth",
    "forward", "generalization_error", "grid_world_sample", "ground_truth_risk", "init_mlp",
    "inject_label_noise", "lemma1_identity_check", "load_idx", "noise_expectation_term", "partition_iid",
    "path_norm_proxy", "run_federation", "run_round", "sgd_epochs", "theorem1_bound", "write_idx",
]

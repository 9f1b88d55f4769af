"""Federated semi-supervised learning simulator (FedLabel and baselines)."""
from .data import ClientDataset, Dataset, PartitionSpec
from .federation import Method, MethodConfig, run_training
from .harness import ExperimentConfig, parse_config, run_experiment
from .nn import ModelParams
from .pseudolabel import SslConfig

__all__ = [
    "ClientDataset", "Dataset", "ExperimentConfig", "Method", "MethodConfig", "ModelParams",
    "PartitionSpec", "SslConfig", "parse_config", "run_experiment", "run_training",
]
__version__ = "0.1.0"

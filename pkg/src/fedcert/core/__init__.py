"""
fedcert Core - Data, training, ensembles and certification
"""

from .errors import FedCertError, ConfigError, FormatError, CapError, NumericError, CertificateViolation
from .config import RuntimeConfig, ExperimentConfig, get_config, load_experiment_config
from .datasets import Dataset, ClientPartition, PartitionConfig, partition_noniid
from .ensemble import EnsembleMode, PredictionMatrix, train_ensemble
from .certify import ABSTAIN, Certificate, certify_all, exact_certify, certified_accuracy_curve

__all__ = [
    "FedCertError",
    "ConfigError",
    "FormatError",
    "CapError",
    "NumericError",
    "CertificateViolation",
    "RuntimeConfig",
    "ExperimentConfig",
    "get_config",
    "load_experiment_config",
    "Dataset",
    "ClientPartition",
    "PartitionConfig",
    "partition_noniid",
    "EnsembleMode",
    "PredictionMatrix",
    "train_ensemble",
    "ABSTAIN",
    "Certificate",
    "certify_all",
    "exact_certify",
    "certified_accuracy_curve",
]

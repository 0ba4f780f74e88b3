"""
fedcert - Ensemble federated learning with certified security

Trains one federated model per subsample of clients and certifies, per test
example, how many malicious clients the majority vote can tolerate.
"""

__version__ = "1.0.0"
__license__ = "MIT"

# Core
from .core import (
    ABSTAIN,
    Certificate,
    ClientPartition,
    Dataset,
    EnsembleMode,
    ExperimentConfig,
    FedCertError,
    PredictionMatrix,
    RuntimeConfig,
    certify_all,
    exact_certify,
    get_config,
)

__all__ = [
    "ABSTAIN",
    "Certificate",
    "ClientPartition",
    "Dataset",
    "EnsembleMode",
    "ExperimentConfig",
    "FedCertError",
    "PredictionMatrix",
    "RuntimeConfig",
    "certify_all",
    "exact_certify",
    "get_config",
]

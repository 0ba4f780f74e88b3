"""
Exception hierarchy for fedcert.

Every error carries the process exit code the CLI maps it to.
"""

from typing import Optional


class FedCertError(Exception):
    """Base class for all fedcert errors"""

    exit_code: int = 1


class ConfigError(FedCertError):
    """Raised when an experiment or runtime setting is invalid"""

    exit_code = 2


class FormatError(FedCertError):
    """Raised when a dataset or artifact file is malformed"""

    exit_code = 2


class CapError(FedCertError):
    """Raised when an exhaustive enumeration would exceed its configured cap"""

    exit_code = 2


class DomainError(FedCertError):
    """Raised when an argument lies outside the mathematical domain of an operation"""

    exit_code = 2


class ShapeError(FedCertError):
    """Raised on tensor dimension mismatches"""

    exit_code = 4


class NumericError(FedCertError):
    """Raised when a computation produces non-finite values or fails to converge"""

    exit_code = 4


class TrainingError(FedCertError):
    """Raised when training one ensemble member fails"""

    exit_code = 4

    def __init__(self, message: str, row: Optional[int] = None, subsample: Optional[tuple] = None):
        super().__init__(message)
        self.row = row
        self.subsample = subsample


class CertificateViolation(FedCertError):
    """Raised when an attack flips a prediction inside its certified security level"""

    exit_code = 3

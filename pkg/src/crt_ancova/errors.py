"""Exception types raised across the package."""


class CrtAncovaError(Exception):
    """Base class for all package errors."""


class SingularDesign(CrtAncovaError):
    """Weighted Gram matrix (or cluster-level design) is rank deficient."""


class DegreesOfFreedom(CrtAncovaError):
    """Too few clusters for the degrees-of-freedom correction (m <= p + 2)."""


class InvalidPi(CrtAncovaError, ValueError):
    """Randomization probability outside the open interval (0, 1)."""


class SingularCovariance(CrtAncovaError):
    """Empirical covariance matrix of covariates is singular."""


class ConfigError(CrtAncovaError, ValueError):
    """Inconsistent simulation configuration."""


class BadSize(CrtAncovaError, ValueError):
    """Requested subset size exceeds the population size."""


class NoConvergedReps(CrtAncovaError):
    """An estimator produced no usable replication in a simulation study."""


class ParseError(CrtAncovaError, ValueError):
    """Malformed row in a delimited input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InconsistentTreatment(CrtAncovaError, ValueError):
    """A cluster carries more than one treatment value."""


class EmptyDataset(CrtAncovaError, ValueError):
    """No usable cluster remains after ingestion."""

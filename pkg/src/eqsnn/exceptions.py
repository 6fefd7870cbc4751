"""Exception taxonomy shared across the package."""


class EqsnnError(Exception):
    """Base class for all package errors."""


class ShapeError(EqsnnError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(EqsnnError, ValueError):
    """A configuration value violates its contract."""


class ContractError(EqsnnError, ValueError):
    """An operation was called outside its documented contract."""


class DataError(EqsnnError, ValueError):
    """Input data is unusable (empty split, missing columns, ...)."""


class NumericError(EqsnnError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class TrainingAbort(EqsnnError, RuntimeError):
    """Training hit an unrecoverable state (e.g. NaN gradients)."""


class CheckpointError(EqsnnError, ValueError):
    """A checkpoint file is unreadable or corrupt."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class DigestMismatchError(CheckpointError):
    """Checkpoint was written under a different configuration."""

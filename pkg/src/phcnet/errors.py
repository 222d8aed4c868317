"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes, so keep the hierarchy flat and stable.
"""


class PhcnetError(Exception):
    """Base class for all recoverable phcnet errors."""


class ShapeError(PhcnetError, ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(PhcnetError, ValueError):
    """Invalid layer/model/run configuration (e.g. divisibility violations)."""


class ContractError(PhcnetError, ValueError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


class NumericError(PhcnetError, ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class TransferError(PhcnetError, RuntimeError):
    """Weight transfer between models failed; message lists offending tensors."""


class CheckpointError(PhcnetError, RuntimeError):
    """Checkpoint file is malformed or violates the format contract."""


class MetricError(PhcnetError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class DataError(PhcnetError, ValueError):
    """Malformed dataset artifact: manifest, image file, or patch request."""

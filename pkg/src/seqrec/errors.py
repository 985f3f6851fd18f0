"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: data problems (parsing, schemas,
checkpoints, missing candidates) exit 2, numeric failures (shape mismatches,
degenerate rows, non-finite losses, contract violations) exit 3, and bad
configuration values exit 1 alongside ordinary usage errors.
"""


class SeqrecError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SeqrecError):
    """An invalid configuration value (bad dimension, dropout rate, mode)."""


class ContractError(SeqrecError):
    """An API precondition was violated by the caller."""


class ShapeError(SeqrecError):
    """Tensor operands have incompatible shapes."""


class DegenerateRowError(SeqrecError):
    """A masked softmax row had every entry blocked."""


class NumericError(SeqrecError):
    """Numeric failure during optimization."""


class NonFiniteLossError(NumericError):
    """The training loss became NaN or infinite."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, "
            f"last gradient norm={grad_norm:.3e})"
        )


class DataError(SeqrecError):
    """Base class for input-data problems."""


class ParseError(DataError):
    """A malformed line in an input file."""


class SchemaError(DataError):
    """A column specification does not match the input file."""


class EmptyDatasetError(DataError):
    """No interactions survived filtering."""


class UnknownIdError(DataError):
    """An external user or item id is not in the vocabulary."""


class CandidateShortageError(DataError):
    """Too few catalog items remain to sample the requested negatives."""


class CheckpointError(DataError):
    """Base class for checkpoint file problems."""


class IntegrityError(CheckpointError):
    """A checkpoint file is corrupt, truncated, or has a bad version."""


class ConfigMismatchError(CheckpointError):
    """A checkpoint does not match the requested configuration or dataset."""

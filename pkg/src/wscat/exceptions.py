"""Exception hierarchy shared by every module."""


class WSCATError(Exception):
    """Base class for all package errors."""


class ContractError(WSCATError, ValueError):
    """A caller violated a documented precondition (shape, range, index)."""


class NumericalError(WSCATError, FloatingPointError):
    """A forward pass or loss produced NaN/Inf."""


class ConfigError(WSCATError, ValueError):
    """Invalid, unknown or conflicting configuration."""


class FormatError(WSCATError, ValueError):
    """Corrupt or inconsistent dataset / checkpoint container."""


class AttackError(WSCATError, RuntimeError):
    """An attack (or external adapter) returned an infeasible point."""


class OracleAccessError(WSCATError, PermissionError):
    """Discarded labels of unlabeled data were read outside an oracle context."""


class TrainingDivergence(NumericalError):
    """Non-finite training loss; carries the offending batch index."""

    def __init__(self, epoch, batch_index, value):
        self.epoch = epoch
        self.batch_index = batch_index
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch_index}"
        )

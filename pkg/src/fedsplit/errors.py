class FedSplitError(Exception):
    """Base class for all errors raised by fedsplit."""


class ConfigError(FedSplitError, ValueError):
    """Invalid configuration, shape contract or argument."""


class NumericError(FedSplitError, ArithmeticError):
    """A computation produced a non-finite value."""


class TapeError(FedSplitError, RuntimeError):
    """A forward tape was reused or does not belong to the stack."""


class BlobError(FedSplitError, ValueError):
    """Malformed serialized weight blob."""


class PartitionError(FedSplitError, ValueError):
    """Infeasible partition request."""


class LedgerError(FedSplitError, ValueError):
    """A message's declared scalar count disagrees with its payload."""

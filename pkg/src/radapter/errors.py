"""Exception hierarchy shared by all radapter modules."""


class RAdapterError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RAdapterError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateEmbeddingError(RAdapterError, ValueError):
    """A vector that must be normalized has zero length."""


class ContractError(RAdapterError, ValueError):
    """An input violates a documented precondition (e.g. non-unit rows)."""


class SpecError(RAdapterError, ValueError):
    """A task or training configuration is inconsistent."""


class DataError(RAdapterError):
    """Dataset files are missing, malformed or insufficient for a request."""


class NumericalError(RAdapterError, ArithmeticError):
    """A computation produced non-finite values or failed a numerical check."""


class CheckpointError(RAdapterError):
    """Base class for checkpoint format problems."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class OverlappingTensorsError(CheckpointError):
    pass


class OutOfBoundsError(CheckpointError):
    pass


class MissingAdapterError(CheckpointError):
    """A merge was requested on a checkpoint that carries no adapters."""

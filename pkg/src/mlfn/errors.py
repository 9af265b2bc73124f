"""Exception types shared across the package."""


class MlfnError(Exception):
    """Base class for package-specific errors."""


class ShapeError(MlfnError, ValueError):
    """Operands have inconsistent or unsupported shapes/dtypes."""


class DegenerateBatchError(MlfnError, ValueError):
    """Batch statistics requested for a batch too small to provide them."""


class ContractError(MlfnError):
    """An operation was invoked outside its contract (e.g. non-scalar loss)."""


class DeterminismError(MlfnError):
    """Two forward passes of a supposedly deterministic function disagreed."""


class DivergenceError(MlfnError):
    """Training loss became NaN or stayed blown up past the guard window."""


class CapacityError(MlfnError, ValueError):
    """Requested more identities than the factor space can enumerate."""


class CheckpointError(MlfnError):
    """Checkpoint file is malformed or does not match the model config."""

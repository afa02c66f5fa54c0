"""Exception types shared across the package."""


class SimOfdmError(Exception):
    """Base class for all package errors."""


class ConfigError(SimOfdmError):
    """Inconsistent configuration: bad dimensions, unknown keys, invalid values."""


class DomainError(SimOfdmError, ValueError):
    """Input outside the mathematical domain of an operation."""


class GraphStateError(SimOfdmError, RuntimeError):
    """Autodiff graph used out of order (e.g. backward without a recorded forward)."""


class DegenerateSignalError(SimOfdmError, RuntimeError):
    """Power control received an (effectively) all-zero signal for some batch samples."""

    def __init__(self, sample_indices):
        self.sample_indices = list(sample_indices)
        super().__init__(
            f"degenerate all-zero transmit signal for batch samples {self.sample_indices}"
        )


class DivergenceError(SimOfdmError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, checkpoint=None):
        self.epoch = epoch
        self.checkpoint = checkpoint  # last good (params, bn_state) snapshot, if any
        super().__init__(message)

"""Exception types shared across the toolkit."""


class SketchmodError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(SketchmodError, ValueError):
    """An operation was called with arguments violating its contract
    (shape mismatch, out-of-range timestep, inconsistent dimensions)."""


class GeometryError(SketchmodError, ValueError):
    """Spatial geometry is incompatible (non-divisible sizes, wrong
    resolutions)."""


class ConfigError(SketchmodError, ValueError):
    """A configuration value or combination is invalid."""


class InputError(SketchmodError, ValueError):
    """A data input (image, manifest entry, …) is unusable."""


class NumericError(SketchmodError, ArithmeticError):
    """A numerical precondition failed beyond tolerance (e.g. a covariance
    matrix that is not positive semi-definite)."""


class NonFiniteLossError(SketchmodError, RuntimeError):
    """Training produced a non-finite loss.  Carries the path of the
    diagnostic snapshot written before aborting."""

    def __init__(self, message: str, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path

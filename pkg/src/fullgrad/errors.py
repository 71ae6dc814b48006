"""Exception types raised across the package."""


class FullGradError(Exception):
    """Base class for all package errors."""


class DimensionError(FullGradError, ValueError):
    """Tensor extents do not fit the requested operation."""


class DomainError(FullGradError, ValueError):
    """A numeric argument lies outside the operation's domain."""


class SpecError(FullGradError, ValueError):
    """A network description does not compose.

    ``layer`` holds the index of the first offending layer, when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ModelFormatError(FullGradError, ValueError):
    """A model manifest or weights blob is malformed or inconsistent."""


class TraceMismatchError(FullGradError, ValueError):
    """An activation trace was not produced by the given network."""


class NearKinkError(FullGradError, ValueError):
    """A finite-difference probe would straddle a ReLU or max-pool kink."""


class CompletenessError(FullGradError, ArithmeticError):
    """The full-gradient decomposition failed to reconstruct the output."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingDivergedError(FullGradError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigurationError(FullGradError, ValueError):
    """An evaluation protocol was asked for an unsupported combination."""


class IDXFormatError(FullGradError, ValueError):
    pass

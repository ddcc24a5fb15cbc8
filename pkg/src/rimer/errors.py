"""Exception hierarchy shared by every rimer module."""


class RimerError(Exception):
    """Base class for all rimer errors."""


class DimensionError(RimerError, ValueError):
    pass


class ContractError(RimerError, ValueError):
    pass


class NonFiniteError(RimerError, FloatingPointError):
    """Raised when an op produces NaN/inf.

    ``where`` names the offending location (head, layer, timestep) when known.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class NonConvergenceError(RimerError, RuntimeError):
    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(RimerError, ValueError):
    pass


class LoadError(RimerError, ValueError):
    """Dataset could not be read (bad cell, ragged row, empty file, missing path)."""


class InputError(RimerError, ValueError):
    pass


class DivergenceError(RimerError, RuntimeError):
    pass


class ReportError(RimerError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CheckpointError(RimerError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unreadable header/metadata."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    """Parameter blob length disagrees with the manifest."""


class GradcheckError(RimerError, AssertionError):
    def __init__(self, message, worst_param=None):
        super().__init__(message)
        self.worst_param = worst_param

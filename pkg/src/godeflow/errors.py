"""Shared exception types.

Every failure the library raises deliberately derives from one of these, so
the command line layer can map them onto stable exit codes.
"""


class GodeflowError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(GodeflowError, ValueError):
    """An argument or configuration value is outside its legal range."""


class DimensionError(GodeflowError, ValueError):
    """Tensor or array shapes are incompatible for the requested operation."""


class DomainError(GodeflowError, ValueError):
    """A numeric input left the mathematical domain of an operation."""


class GraphConstructionError(GodeflowError, ValueError):
    """An edge list refers to nodes that do not exist."""


class SimulationError(GodeflowError, RuntimeError):
    """The trajectory simulation produced a non-finite state."""


class SolveError(GodeflowError, RuntimeError):
    """The latent ODE solve produced a non-finite state."""


class TrainingError(GodeflowError, RuntimeError):
    """Training diverged or was asked to do something inconsistent."""


class OptimStateError(GodeflowError, RuntimeError):
    """Optimizer state does not match the parameters it is applied to."""


class CheckpointError(GodeflowError, RuntimeError):
    """A checkpoint file is missing, corrupt, or of the wrong format."""


class DatasetError(GodeflowError, RuntimeError):
    """A dataset directory is missing files or internally inconsistent."""


class ConfigError(GodeflowError, ValueError):
    """A run configuration file could not be parsed or validated."""

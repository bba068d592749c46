"""Exception hierarchy shared by every quantnoise module."""


class QuantNoiseError(Exception):
    """Base class for all errors raised by quantnoise."""


class ConfigurationError(QuantNoiseError, ValueError):
    """Invalid parameters: quantizer ranges, noise scales, scenario fields."""


class PartitionError(QuantNoiseError):
    """The (n, k) differences could not be grouped within the tolerance."""


class EstimationError(QuantNoiseError):
    """Records and partition are inconsistent, or too few points to operate on."""


class FitError(QuantNoiseError):
    """A least-squares fit cannot be set up or solved."""


class CalibrationError(QuantNoiseError):
    """The servoloop cannot locate a transition level."""


class StageError(QuantNoiseError):
    """A scenario pipeline stage failed.

    Attributes:
        stage (str): Name of the failing stage.
        cause (Exception): The original exception.
    """

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class NonConvergenceError(QuantNoiseError):
    """An iterative procedure stopped before converging; artifacts were kept."""

"""Exception types raised across the pipeline."""


class SimGraspError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SimGraspError, ValueError):
    pass


class InsufficientPointsError(InvalidInputError):
    pass


class DegenerateHistogramError(SimGraspError):
    pass


class TooSparseError(SimGraspError):
    pass


class NoContactRegionError(SimGraspError):
    pass


class DegenerateProjectionError(SimGraspError):
    pass


class UnknownWordError(SimGraspError, KeyError):
    pass


class SemanticUnavailableError(SimGraspError):
    pass


class NoPlaneError(SimGraspError):
    pass


class CoarseFailureError(SimGraspError):
    pass


class RegistrationFailedError(SimGraspError):
    pass


class NoGraspFoundError(SimGraspError):
    pass


class FinetuneFailedError(SimGraspError):
    pass


class NoFeasibleGraspError(SimGraspError):
    """Every candidate model was exhausted without a usable grasp."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EmptyRenderError(SimGraspError):
    pass


class DatabaseLoadError(SimGraspError):
    pass


class ConfigError(SimGraspError, ValueError):
    pass

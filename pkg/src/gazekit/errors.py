"""Exception hierarchy shared across the pipeline.

Every error raised on purpose by gazekit derives from :class:`GazeKitError`,
so the CLI can map them to exit code 1 with the message intact.
"""


class GazeKitError(Exception):
    pass


# ingest
class MissingSidecar(GazeKitError):
    pass


class MalformedJson(GazeKitError):
    pass


class LengthMismatch(GazeKitError):
    pass


# splits
class UnknownDeviceModel(GazeKitError):
    pass


class UnassignedParticipant(GazeKitError):
    pass


class InfeasibleSplit(GazeKitError):
    pass


class TooFewDots(InfeasibleSplit):
    pass


# numerics
class ShapeMismatch(GazeKitError, ValueError):
    pass


class NumericFault(GazeKitError, ArithmeticError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ZeroBatch(GazeKitError, ValueError):
    pass


# gazenet
class DegenerateCrop(GazeKitError):
    pass


class DecodeError(GazeKitError):
    pass


class EmptySplit(GazeKitError):
    pass


class EmptyEvalSet(GazeKitError):
    pass


class CheckpointFormatError(GazeKitError):
    pass


# personalize
class InsufficientFrames(GazeKitError):
    pass


class MissingCalibrationDots(GazeKitError):
    pass


class SolverNonConvergence(GazeKitError):
    def __init__(self, message, max_violation=None):
        super().__init__(message)
        self.max_violation = max_violation


class DegenerateGeometry(GazeKitError):
    pass


# evalviz
class EmptyInput(GazeKitError, ValueError):
    pass


class ConfigError(GazeKitError):
    pass

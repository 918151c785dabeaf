class FlowMCError(Exception):
    """Base class for all errors raised by flowmc"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InvalidConfigError(FlowMCError):
    exit_code = 2


class FormatError(FlowMCError):
    exit_code = 2


class ShapeError(FlowMCError):
    exit_code = 3


class DomainError(FlowMCError):
    exit_code = 3


class ParameterError(FlowMCError):
    exit_code = 3


class NonFiniteGradientError(FlowMCError):
    exit_code = 3


class DegenerateDensityError(FlowMCError):
    exit_code = 3


class TargetEvaluationError(FlowMCError):
    exit_code = 3


class RejectedStepsError(FlowMCError):
    exit_code = 4

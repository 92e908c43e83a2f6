"""Exception hierarchy. Each error names the module that raised it."""


class TwoPhaseError(Exception):
    module = "twophase"


class DataError(TwoPhaseError, ValueError):
    module = "data-model"


class ConfigError(TwoPhaseError, ValueError):
    module = "cli"


class NumericalError(TwoPhaseError, ArithmeticError):
    """Base for failures of an iterative or linear-algebra step."""


class ConvergenceError(NumericalError):
    module = "glm"

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SeparationError(NumericalError):
    module = "glm"


class SingularInformationError(NumericalError):
    module = "glm"


class VarianceError(NumericalError):
    module = "glm"


class AllocationError(TwoPhaseError, ValueError):
    module = "allocation"


class CalibrationError(NumericalError):
    module = "raking"


class DesignError(TwoPhaseError, ValueError):
    module = "multiwave"

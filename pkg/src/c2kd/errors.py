"""Exception hierarchy shared by every c2kd module."""


class C2KDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(C2KDError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(C2KDError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class ContractError(C2KDError, ValueError):
    """An input violates a documented precondition (normalization, stochasticity)."""


class DegenerateEmbeddingError(C2KDError, ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm:.3e}, below the normalization threshold")
        self.row = row
        self.norm = norm


class EvaluationError(C2KDError, RuntimeError):
    """A loss evaluation produced a non-finite value."""


class InputError(C2KDError, ValueError):
    """An encoder or ranking input is empty or malformed."""


class ConfigurationError(C2KDError, ValueError):
    """Model or training configuration is inconsistent."""


class DataError(C2KDError, ValueError):
    """A corpus record lacks something a stage needs."""


class SpecError(C2KDError, ValueError):
    """A synthetic corpus specification violates its invariants."""


class FormatError(C2KDError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergenceError(C2KDError, RuntimeError):
    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class ConfigError(C2KDError, ValueError):
    """Experiment config failed schema validation."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class StageError(C2KDError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

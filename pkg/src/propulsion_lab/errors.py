"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LabError(Exception):
    exit_code = 1


class DimensionError(LabError, ValueError):
    exit_code = 2


class ContractError(LabError, RuntimeError):
    exit_code = 2


class UnsupportedDegreeError(LabError, ValueError):
    exit_code = 2


class SpecError(LabError, ValueError):
    exit_code = 2


class AttachmentError(LabError, ValueError):
    exit_code = 2


class ConfigError(LabError, ValueError):
    """Bad configuration. ``field`` is the dotted path of the offending key."""

    exit_code = 2

    def __init__(self, message, field=None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class DataError(LabError, ValueError):
    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergedError(LabError, FloatingPointError):
    exit_code = 4

    def __init__(self, step, loss=float("nan")):
        super().__init__(f"loss diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ResourceLimitError(LabError, MemoryError):
    exit_code = 5


class DomainError(LabError, ValueError):
    exit_code = 2

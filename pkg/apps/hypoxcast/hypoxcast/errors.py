"""
Exception hierarchy for Hypoxcast

DataValidationError subclasses map to CLI exit code 1, RuntimeFailure
subclasses to exit code 2.
"""


class HypoxcastError(Exception):
    """Base class for every error raised by the package"""


class DataValidationError(HypoxcastError):
    exit_code = 1


class RuntimeFailure(HypoxcastError):
    exit_code = 2


class SchemaError(DataValidationError):
    pass


class CohortFormatError(DataValidationError):
    pass


class SplitError(DataValidationError):
    pass


class ConfigError(DataValidationError):
    pass


class FeatureLayoutError(DataValidationError):
    pass


class LookbackMismatchError(DataValidationError):
    pass


class NoPositiveLabelsError(DataValidationError, ValueError):
    pass


class TrainingError(RuntimeFailure):
    pass


class ContainerError(RuntimeFailure):
    pass


class ChecksumError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class ModelTypeError(ContainerError):
    pass


class RunLockedError(RuntimeFailure):
    pass


class StageError(RuntimeFailure):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

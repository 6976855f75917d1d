"""Exception hierarchy. Expected failures raise one of these; the CLI maps them to exit codes."""


class FusionLabError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(FusionLabError):
    def __init__(self, key_path, message):
        self.key_path = key_path
        self.detail = message
        super().__init__(f"{key_path}: {message}" if key_path else message)


class DatasetError(FusionLabError):
    pass


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class NonFiniteValueError(DatasetError):
    pass


class CorruptionError(DatasetError):
    pass


class DuplicateInstanceError(DatasetError):
    pass


class EmptyPartitionError(DatasetError):
    pass


class ShapeError(FusionLabError):
    pass


class TapeConsumedError(FusionLabError):
    pass


class NonFiniteGradientError(FusionLabError):
    def __init__(self, parameter_name):
        self.parameter_name = parameter_name
        super().__init__(f"non-finite gradient for parameter {parameter_name}")


class ScheduleError(FusionLabError):
    pass


class TrainingDivergedError(FusionLabError):
    def __init__(self, message, last_good=None, step=None):
        self.last_good = last_good
        self.step = step
        super().__init__(message)


class WrongKindError(FusionLabError):
    pass


class MetricError(FusionLabError):
    pass


class LatentsUnavailableError(FusionLabError):
    pass

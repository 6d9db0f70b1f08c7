class MtslocError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(MtslocError, ValueError):
    exit_code = 2


class IngestionError(MtslocError, ValueError):
    exit_code = 2


class MissingArtifactError(MtslocError):
    exit_code = 3


class NumericalError(MtslocError, ArithmeticError):
    exit_code = 4

"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class ChartransError(Exception):
    exit_code = 1


class UsageError(ChartransError):
    exit_code = 1


class IOFailure(ChartransError):
    exit_code = 2


class DataError(ChartransError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    """Operand shapes are incompatible."""


class VocabularyError(DataError):
    """A token id falls outside the vocabulary."""


class ConfigError(DataError):
    """Unknown or malformed configuration key."""


class CheckpointError(DataError):
    """Checkpoint magic, version or layout is wrong."""


class NumericError(ChartransError, ArithmeticError):
    exit_code = 4

"""Exception hierarchy shared by every robusteval module."""


class RobustEvalError(Exception):
    """Base class for all errors raised by robusteval."""


class ConfigurationError(RobustEvalError, ValueError):
    """A model or experiment configuration field holds an invalid value.

    The offending field name is kept on ``field`` so error-seeking test
    cases can check which characteristic tripped.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatasetError(RobustEvalError):
    """Base class for dataset loading failures."""


class DatasetFormatError(DatasetError, ValueError):
    """Bad magic number, record size, or header layout."""


class DatasetConsistencyError(DatasetError, ValueError):
    """Headers or labels disagree with each other."""


class TruncatedFileError(DatasetError, OSError):
    """The file ended before the payload its header promised."""


class UnknownDatasetError(DatasetError, ConfigurationError):
    """Dataset name is missing or not an image dataset we know how to load."""

    def __init__(self, name):
        ConfigurationError.__init__(self, "dataset", f"unknown or empty dataset {name!r}")
        self.name = name


class NumericError(RobustEvalError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ModelStateError(RobustEvalError, RuntimeError):
    """The model is not in a state that permits the operation (e.g. untrained)."""


class DegenerateInputError(RobustEvalError, ValueError):
    """A metric or statistic is undefined for the given input."""


class UndefinedRateError(DegenerateInputError):
    """No pre-attack-correct samples exist, so a success rate is undefined."""

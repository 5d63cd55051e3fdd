"""Exception taxonomy. Each class carries the CLI exit code for its category."""


class SpartaError(Exception):
    exit_code = 1


class DimensionError(SpartaError, ValueError):
    pass


class ConfigError(SpartaError, ValueError):
    pass


class EncodingError(SpartaError, ValueError):
    pass


class ConsistencyError(SpartaError, ValueError):
    pass


class StateError(SpartaError, RuntimeError):
    pass


class VocabularyError(SpartaError, IndexError):
    pass


class InputError(SpartaError, ValueError):
    pass


class NumericError(SpartaError, ArithmeticError):
    pass


class NoSavings(SpartaError, ValueError):
    """Raised when a density gives no memory savings over full fine-tuning (k >= 0.5)."""


class FormatError(SpartaError, ValueError):
    exit_code = 3


class DataError(SpartaError, ValueError):
    exit_code = 3


class PairingError(FormatError):
    pass


class TrainingDiverged(SpartaError, RuntimeError):
    """NaN/Inf loss or gradient during training.

    ``snapshot`` holds the last good adapter state, ``metrics`` the partial run.
    """

    def __init__(self, message, snapshot=None, metrics=None):
        super().__init__(message)
        self.snapshot = snapshot
        self.metrics = metrics

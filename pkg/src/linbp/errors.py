"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command line layer
never has to know which module raised.
"""


class LinBPError(Exception):
    exit_code = 2


class ConfigError(LinBPError, ValueError):
    """Invalid knob, hyperparameter or usage."""

    exit_code = 1


class ShapeError(LinBPError, ValueError):
    """Tensor dimensions do not agree."""

    exit_code = 2


class SplitError(ConfigError):
    pass


class StaleTapeError(LinBPError, RuntimeError):
    """An activation tape was replayed against a network that did not produce it."""

    exit_code = 2


class FormatError(LinBPError, ValueError):
    exit_code = 2


class IntegrityError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ShortfallError(LinBPError, RuntimeError):
    """Not enough correctly classified samples to satisfy ``sample_count``."""

    exit_code = 2

    def __init__(self, message, available):
        super().__init__(message)
        self.available = available


class EvaluationError(LinBPError, ArithmeticError):
    """A function under finite differencing returned a non-finite value."""

    exit_code = 3

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(LinBPError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class LabelError(LinBPError, IndexError):
    """Class index outside ``[0, num_classes)``."""

    exit_code = 2

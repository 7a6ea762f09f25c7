"""
Exception hierarchy shared by every normtweak component
"""

from typing import List


class NormTweakError(Exception):
    """Base class for all errors raised by the toolkit"""


class DimensionError(NormTweakError, ValueError):
    """Tensor shapes or axes do not agree"""


class ContractError(NormTweakError):
    """A documented precondition of an operation was violated"""


class InputError(NormTweakError, ValueError):
    """User-supplied data (token ids, corpora, files) is unusable"""


class FormatError(NormTweakError):
    """A checkpoint or calibration file is malformed"""


class NumericError(NormTweakError, ArithmeticError):
    """A numerical routine failed (Cholesky, non-finite values)"""


class NonFiniteGradientError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    pass


class LayerError(NormTweakError):
    """Wraps a failure raised while processing one transformer block"""

    def __init__(self, layer: int, cause: Exception):
        self.layer = layer
        self.cause = cause
        super().__init__(f"layer {layer}: {type(cause).__name__}: {cause}")


class ConfigValidationError(NormTweakError):
    """Carries every violation found while validating a configuration"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ArgumentError(NormTweakError):
    """Command-line flags rejected by the argument parser"""

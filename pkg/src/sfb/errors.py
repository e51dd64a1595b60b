"""Exception hierarchy shared by every sfb module."""


class SfbError(Exception):
    """Base class for all errors raised by this package."""


class InvalidProbability(SfbError, ValueError):
    pass


class ConflictingCertainty(SfbError, ValueError):
    """Stable and unstable predictions are saturated in opposite directions."""


class ZeroMass(SfbError, ValueError):
    pass


class EmptyInput(SfbError, ValueError):
    pass


class DegenerateClassMass(SfbError, ValueError):
    """A soft class count is zero, so class-wise accuracies are undefined."""


class UninformativeStable(SfbError):
    """Pseudo-labels carry (numerically) no information about the label.

    Raised when eps0 + eps1 - 1 (or the smallest singular value of the
    confusion matrix) falls below the informativeness threshold. Callers
    are expected to fall back to stable-only predictions.
    """


class LearnerFailure(SfbError):
    pass


class LengthMismatch(SfbError, ValueError):
    pass


class ShapeMismatch(SfbError, ValueError):
    pass


class StaleTape(SfbError):
    pass


class BadSplit(SfbError, ValueError):
    pass


class EmptyEnvironment(SfbError, ValueError):
    pass


class TooFewEnvironments(SfbError, ValueError):
    pass


class DegenerateClass(SfbError, ValueError):
    pass


class NonFiniteLoss(SfbError, FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite objective {value!r} at step {step}")
        self.step = step
        self.value = value


class UnsupportedGenerator(SfbError, ValueError):
    pass


class BadMagic(SfbError, ValueError):
    pass


class TruncatedFile(SfbError, ValueError):
    pass


class CountMismatch(SfbError, ValueError):
    pass


class ConfigError(SfbError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field

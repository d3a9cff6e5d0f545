"""Exception hierarchy.

Every error raised on purpose by this package derives from ``HoromError`` and
carries a short ``category`` string; the command-line entry point maps the
category to a process exit code.
"""


class HoromError(Exception):
    category = "internal"


class InvalidArgumentError(HoromError, ValueError):
    category = "invalid-argument"


class DegenerateGridError(HoromError, ValueError):
    category = "degenerate-grid"


class InsufficientPointsError(HoromError, ValueError):
    category = "insufficient-points"


class ShapeError(HoromError, ValueError):
    category = "shape"


class NonFiniteGradientError(HoromError, FloatingPointError):
    category = "non-finite-gradient"


class NonFiniteLossError(HoromError, FloatingPointError):
    category = "non-finite-loss"

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DivergenceError(HoromError, FloatingPointError):
    """Latent integration left the divergence guard."""

    category = "divergence"

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = context


class StabilityError(HoromError, ValueError):
    category = "stability"


class ConditioningError(HoromError, ValueError):
    category = "conditioning"


class DegenerateTruthError(HoromError, ValueError):
    category = "degenerate-truth"


class ConfigError(HoromError, ValueError):
    category = "config"


class DatasetError(HoromError, OSError):
    category = "dataset"


EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "dataset": 3,
    "invalid-argument": 4,
    "shape": 4,
    "degenerate-grid": 5,
    "insufficient-points": 5,
    "stability": 6,
    "divergence": 7,
    "non-finite-gradient": 8,
    "non-finite-loss": 8,
    "conditioning": 9,
    "degenerate-truth": 10,
}

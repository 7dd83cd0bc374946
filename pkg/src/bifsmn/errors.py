"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
``error:<category>:`` prefix.
"""


class BifsmnError(Exception):
    category = "internal"


class ShapeError(BifsmnError, ValueError):
    category = "shape"


class ConfigError(BifsmnError, ValueError):
    category = "config"


class IntegrityError(BifsmnError, ValueError):
    category = "integrity"


class DegenerateError(BifsmnError, ArithmeticError):
    category = "degenerate"


class DivergenceError(BifsmnError, FloatingPointError):
    category = "divergence"


class LoadError(BifsmnError, IOError):
    """Structured failure while reading a model or feature file."""

    category = "load"

    def __init__(self, reason, message):
        super().__init__(message)
        self.reason = reason

"""Exception types shared across onglab modules."""


class OngLabError(Exception):
    """Base class; ``module`` tags which subsystem raised it."""

    module = "onglab"


class StructuralError(OngLabError, ValueError):
    """Shapes, dimensions or indices that do not fit together."""


class EmptyBatchError(StructuralError):
    pass


class NumericalError(OngLabError, ArithmeticError):
    """Non-finite values or an iteration that failed to converge."""


class StateError(OngLabError, RuntimeError):
    """An operation was called before the state it needs was populated."""


class FormatError(OngLabError, ValueError):
    """Malformed input file."""


class ConfigError(OngLabError, ValueError):
    """Bad experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key

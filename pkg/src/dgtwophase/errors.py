"""Exception types shared across the package."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach the requested tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class MatrixPropertyError(ValueError):
    """A matrix violates a structural requirement (zero diagonal, indefiniteness)."""


class DegenerateObservableError(ValueError):
    """An observable quotient has a vanishing denominator."""


class ConfigError(ValueError):
    """A scenario configuration is malformed or violates a constraint."""

    def __init__(self, message, location=None):
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location

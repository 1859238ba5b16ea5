class ValidationError(ValueError):
    """Input violates a documented invariant."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CapacityError(MemoryError):
    """Requested hierarchy or Hilbert space exceeds the configured budget."""

    def __init__(self, message, size=None):
        self.size = size
        super().__init__(message)


class NumericError(ArithmeticError):
    pass


class IntegrityError(NumericError):
    """A conserved quantity drifted beyond tolerance."""


class ConvergenceError(NumericError):
    """An iterative procedure did not meet its criterion.

    ``diagnostics`` carries whatever the caller needs to judge how far off the
    result was (best residual, last observable deltas, ...).
    """

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        super().__init__(message)

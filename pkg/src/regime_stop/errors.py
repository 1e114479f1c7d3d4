"""Exception hierarchy shared by the solvers and the command line front end."""


class RegimeStopError(Exception):
    """Base class for all package errors."""


class NonGenerator(RegimeStopError, ValueError):
    """Matrix is not a valid column-convention rate matrix."""


class PreconditionViolated(RegimeStopError, ValueError):
    pass


class InternalError(RegimeStopError, RuntimeError):
    """A numerically guaranteed property failed; indicates a bug or overflow."""


class RootBracketingFailed(RegimeStopError, RuntimeError):
    pass


class NoCaseConverged(RegimeStopError, RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = dict(residuals or {})


class AmbiguousCase(RegimeStopError, RuntimeError):
    pass


class NonMonotoneScheme(RegimeStopError, ValueError):
    pass


class MaxIterExceeded(RegimeStopError, RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularMatrix(RegimeStopError, ArithmeticError):
    pass


class DivergentEstimate(RegimeStopError, RuntimeError):
    pass


class ConfigError(RegimeStopError, ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=0, column=0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ValidationError(ConfigError):
    def __init__(self, key_path, constraint):
        super().__init__(f"{key_path}: {constraint}")
        self.key_path = key_path
        self.constraint = constraint

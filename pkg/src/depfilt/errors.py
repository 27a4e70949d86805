"""Exception types shared across the toolkit."""


class DepfiltError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(DepfiltError):
    """Malformed numeric input (non-finite entries, negative tolerances, ...)."""


class DimensionError(DepfiltError):
    """Incompatible matrix/vector shapes."""


class ExpressionSyntaxError(DepfiltError):
    """Parse failure in the nonlinearity expression language."""

    def __init__(self, message, line=1, column=0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class EvaluationError(DepfiltError):
    """Domain error while evaluating an expression (log of nonpositive, x/0)."""


class ModelValidationError(DepfiltError):
    """A structural assumption on the plant failed (regularity, observability, ...)."""


class NonAffineError(DepfiltError):
    """Attempt to multiply two decision-variable expressions."""


class SynthesisInfeasibleError(DepfiltError):
    """Every rung of the constraint ladder came back infeasible."""

    def __init__(self, message, diagnosis=None):
        super().__init__(message)
        self.diagnosis = diagnosis or []


class CertificationUnavailableError(DepfiltError):
    """Margins were requested for a solution that is not Optimal."""


class ConsistencyError(DepfiltError):
    """Newton failed to locate a consistent initial point."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SimulationAbortedError(DepfiltError):
    """Newton failed mid-integration; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(DepfiltError):
    """Config file problem, with file/line context when available."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:" if line is None else f"{path}:{line}: "
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line

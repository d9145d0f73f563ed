"""Exception hierarchy shared across the package."""


class GraphFMError(Exception):
    """Base class for all package errors."""


class SizeError(GraphFMError, ValueError):
    """Input dimensions are inconsistent or too small."""


class ConvergenceError(GraphFMError, RuntimeError):
    """An iterative eigensolver failed to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DivergenceError(GraphFMError, RuntimeError):
    """The optimizer produced a non-finite objective."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DataError(GraphFMError, ValueError):
    """Malformed or missing input data. Carries a location when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class RaggedRowError(DataError):
    pass


class NonNumericError(DataError):
    pass


class EmptyFileError(DataError):
    pass


class DisjointnessError(DataError):
    pass


class ReportVersionError(DataError):
    pass


class ConfigError(GraphFMError, ValueError):
    """Invalid run configuration."""

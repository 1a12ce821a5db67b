"""Exception hierarchy shared by every scfm module."""


class ScfmError(Exception):
    """Base class for all library errors."""


class ShapeError(ScfmError, ValueError):
    pass


class GraphError(ScfmError, ValueError):
    pass


class NumericalError(ScfmError, ArithmeticError):
    pass


class DomainError(ScfmError, ValueError):
    pass


class TimeSingularityError(DomainError):
    """Velocity requested at a time where 1 - f(t) vanishes."""


class SolverStallError(ScfmError, RuntimeError):
    pass


class DegenerateRepresentationError(ScfmError, ValueError):
    pass


class ConstructionError(ScfmError, RuntimeError):
    pass


class EstimatorDegenerateError(ScfmError, RuntimeError):
    pass


class VerificationError(ScfmError, AssertionError):
    pass


class FormatError(ScfmError, ValueError):
    pass


class IoError(ScfmError, OSError):
    pass


class ConfigError(ScfmError, ValueError):
    pass


class MetricValueError(ScfmError, ValueError):
    """A metric value could not be serialized (non-finite)."""

    def __init__(self, key, value):
        super().__init__(f"metric {key!r} is not finite: {value!r}")
        self.key = key

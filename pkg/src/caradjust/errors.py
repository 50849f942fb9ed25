"""Exception hierarchy shared across the package.

Configuration and input problems derive from :class:`InputError`; failures
that occur while estimating on otherwise valid data derive from
:class:`EstimationError`. The CLI maps the former to exit code 2 and the
latter to exit code 3.
"""


class CarAdjustError(Exception):
    """Base class for all package errors."""


class InputError(CarAdjustError):
    """Invalid configuration, schema, or data supplied by the caller."""


class SchemaError(InputError):
    """A required column is missing or a column role is mis-declared."""


class ParseError(InputError):
    """A cell could not be parsed; carries the offending file line."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ValidationError(InputError):
    """Data violates a structural invariant (domains, shapes, labels)."""


class EstimationError(CarAdjustError):
    """An estimator could not be computed on this dataset."""


class DegenerateStratumError(EstimationError):
    """A stratum-arm cell is too small for the requested fit."""

    def __init__(self, message: str, stratum=None, arm: int | None = None):
        super().__init__(message)
        self.stratum = stratum
        self.arm = arm


class SingularDesignError(EstimationError):
    """The least-squares design is rank deficient."""


class DfExhaustedError(EstimationError):
    """Degrees-of-freedom correction has a non-positive denominator."""

    def __init__(self, message: str, stratum=None, arm: int | None = None):
        super().__init__(message)
        self.stratum = stratum
        self.arm = arm


class NonConvergenceError(EstimationError):
    """An iterative solver stopped before reaching its tolerance."""

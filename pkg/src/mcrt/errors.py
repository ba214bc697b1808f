"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class McrtError(Exception):
    exit_code = 1


class ValidationError(McrtError, ValueError):
    """Bad arguments or configuration detected before any computation."""

    exit_code = 2


class DesignError(ValidationError):
    """Arm counts, cluster sizes or labels inconsistent with the trial design."""


class DegenerateCovariateError(ValidationError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"covariate {column!r} has zero variance")


class MustSampleError(ValidationError):
    """Randomization space too large to enumerate."""

    def __init__(self, count, limit):
        self.count = count
        self.limit = limit
        super().__init__(
            f"randomization space has {count} schemes, above the enumeration "
            f"limit {limit}; sample it instead"
        )


class ProtocolError(McrtError):
    """Observed allocation is not a member of the supplied randomization space."""

    exit_code = 3


class NumericalError(McrtError, ArithmeticError):
    exit_code = 4


class CollinearityError(NumericalError):
    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(
            message or f"fixed-effect design is rank deficient; involved columns: {self.columns}"
        )


class ConvergenceError(NumericalError):
    pass

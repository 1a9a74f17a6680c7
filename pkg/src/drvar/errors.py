"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DRVARError(Exception):
    exit_code = 1
    code = "error"


class UsageError(DRVARError, ValueError):
    """Invalid argument or configuration value."""

    exit_code = 2
    code = "usage"


class DataError(DRVARError, ValueError):
    """Malformed input data (parse failures, domain violations)."""

    exit_code = 3
    code = "data"


class NumericalError(DRVARError, ArithmeticError):
    """Singular or ill-conditioned matrices, failed monotonicity checks."""

    exit_code = 4
    code = "numerical"

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SchemaError(DataError):
    """Model or config document does not match the expected schema."""

    code = "schema"

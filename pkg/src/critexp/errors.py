"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CritexpError(Exception):
    exit_code = 1


class InvalidInput(CritexpError, ValueError):
    """Bad parameters: non-elliptic coefficients, violated preconditions."""

    exit_code = 2


class UnsupportedCase(CritexpError):
    """The degenerate case s = 0, for which no construction is implemented."""

    exit_code = 3


class InvariantViolation(CritexpError):
    """A checked identity or mesh invariant failed."""

    exit_code = 4

    def __init__(self, name, detail=""):
        self.name = name
        self.detail = detail
        super().__init__(f"{name}: {detail}" if detail else name)


class BudgetExhausted(CritexpError):
    """The cell budget of a realization was exceeded."""

    exit_code = 5

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial

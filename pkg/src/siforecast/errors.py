"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class SingularityError(DomainError):
    """A coefficient is singular at the requested time (typically s=0 or s=1)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or otherwise broke down.

    ``location`` carries whatever context helps to reproduce the failure
    (step index, time, learning rate, row index...).
    """

    def __init__(self, message, **location):
        self.location = location
        if location:
            where = ", ".join(f"{k}={v}" for k, v in location.items())
            message = f"{message} ({where})"
        super().__init__(message)

"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates a documented precondition."""


class NonFiniteInputError(InvalidInputError):
    pass


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, residual=float("nan"), index=None):
        detail = f"{message} (residual {residual:.3g}"
        if index is not None:
            detail += f", index {index}"
        super().__init__(detail + ")")
        self.residual = residual
        self.index = index


class RankDeficientError(RuntimeError):
    """Empirical loss is not strongly convex on the data."""

    def __init__(self, eigenvalue, message=None, index=None):
        if message is None:
            message = f"design is rank deficient: minimum Hessian eigenvalue {eigenvalue:.3g}"
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.index = index


class StudyAbortedError(RuntimeError):
    """Too many Monte Carlo replications failed for the estimate to be trusted."""

    def __init__(self, message, failures=0, replications=0):
        super().__init__(message)
        self.failures = failures
        self.replications = replications

"""Exception types shared across the package."""


class InputError(ValueError):
    """Rejected input: bad shapes, malformed files, infeasible configuration."""


class NumericalError(RuntimeError):
    """Numerical failure: non-convergence, failed gradient check, undefined metric."""

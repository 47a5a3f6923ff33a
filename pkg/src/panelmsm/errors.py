"""Exception types shared across the package."""


class BoundsError(ValueError):
    """Moments or shape parameters outside the representable region."""


class SpecError(ValueError):
    """Invalid model specification or configuration."""


class DataError(ValueError):
    """Invalid panel dataset (carries a row/line context where known)."""


class LaplaceError(RuntimeError):
    """Laplace approximation unavailable (non-negative-definite curvature)."""


class ConvergenceError(RuntimeError):
    """A numerical search failed to converge within its budget."""

"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """Integration failed (step-size underflow, non-convergence).

    ``diagnostics`` carries a snapshot of the failing state: time, step
    size, error estimate, and the worst particle index.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class CheckFailure(AssertionError):
    """A --check threshold was missed (experiment ran, result out of band)."""

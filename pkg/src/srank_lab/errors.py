"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class NumericError(RuntimeError):
    """A numerical routine failed to converge; carries the residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateMatrixError(ValueError):
    """An operation that requires a nonzero matrix received a zero one."""


class AlignmentUndefinedError(DegenerateMatrixError):
    """Alignment requested for a zero matrix."""


class PreconditionError(ValueError):
    """A validator's stated precondition does not hold for the given inputs."""


class ConstructionError(ValueError):
    """A test-case generator was given infeasible targets."""


class SizeBudgetError(ValueError):
    """The requested computation exceeds its documented size budget."""


class ConfigError(ValueError):
    """A run-configuration file is missing, malformed, or inconsistent."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ManifestError(ValueError):
    """Checkpoint manifests are missing fields or mutually inconsistent."""


class FitError(ValueError):
    """A least-squares fit has a singular or degenerate design."""


class DivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the failing step."""

    def __init__(self, step, message=None):
        super().__init__(message or f"training diverged at step {step}")
        self.step = step


class RegimeExitError(RuntimeError):
    """The feedback simulation left the ordered-spectrum regime.

    Carries the step index at which the ordering broke and the trajectory
    accumulated up to (not including) that step.
    """

    def __init__(self, step, trajectory):
        super().__init__(f"singular values left the ordered regime at step {step}")
        self.step = step
        self.trajectory = trajectory

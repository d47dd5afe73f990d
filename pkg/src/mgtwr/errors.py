"""Exception types raised across the package."""


class MGTWRError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MGTWRError, ValueError):
    """Malformed arguments: non-finite values, bad shapes, out-of-range bandwidths."""


class DegenerateNeighborhoodError(MGTWRError):
    """A focal point received an all-zero weight vector."""

    def __init__(self, focal, message=None):
        self.focal = focal
        super().__init__(message or f"all kernel weights are zero at focal point {focal}")


class SingularFitError(MGTWRError):
    """The weighted local design is rank deficient."""

    def __init__(self, focal, effective_n, message=None):
        self.focal = focal
        self.effective_n = effective_n
        super().__init__(
            message
            or f"singular weighted design at focal point {focal} "
            f"(effective sample size {effective_n:.2f})"
        )


class LocalCollinearityError(MGTWRError):
    """The local cross-product matrix is too badly conditioned."""

    def __init__(self, focal, condition, message=None):
        self.focal = focal
        self.condition = condition
        super().__init__(
            message or f"local condition number {condition:.3g} at focal point {focal}"
        )


class StuckCovariateError(MGTWRError):
    """Every candidate bandwidth pair for a covariate scored +inf AICc."""

    def __init__(self, covariate):
        self.covariate = covariate
        super().__init__(f"no finite AICc candidate for covariate {covariate}")


class InferenceDisabledError(MGTWRError):
    """Exact inference requested above the sample-size cap."""


class InferenceInfeasibleError(MGTWRError):
    """Residual degrees of freedom are not positive."""


class SchemaError(InvalidInputError):
    """Input table does not match the declared or trained column schema."""

"""Exception types shared across the package."""


class ToolkitError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ToolkitError):
    """Operands have incompatible dimensions or supports."""


class EmptyFamily(ToolkitError):
    """An operation received an empty operator family."""


class SchemaError(ToolkitError):
    """A document or config violates its schema.

    ``path`` points at the offending field when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class GenerationError(ToolkitError):
    """Instance or graph generation is infeasible or ran out of attempts."""


class SolverError(ToolkitError):
    """A numerical solver failed to reach its target tolerance.

    Carries the best residual seen so the caller can decide whether to
    relax tolerances or switch algorithms.
    """

    def __init__(self, message: str, best_residual: float | None = None):
        self.best_residual = best_residual
        if best_residual is not None:
            message = f"{message} (best residual {best_residual:.3e})"
        super().__init__(message)


class PremiseError(ToolkitError):
    """A documented precondition (e.g. pairwise commutation) is violated."""


class StructureError(ToolkitError):
    """Block/factor structure extraction failed (e.g. ambiguous clustering)."""


class CapExceeded(ToolkitError):
    """A problem size exceeds a configured cap."""

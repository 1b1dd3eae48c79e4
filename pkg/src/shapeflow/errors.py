"""Exception hierarchy.

Exit-code mapping used by the CLI: configuration / input-validation
errors exit with 2, runtime / numerical errors with 3.
"""


class ShapeflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ShapeflowError):
    """Invalid or incomplete run configuration."""


class GeometryError(ShapeflowError):
    """Requested geometry violates preconditions (overlaps, clearances)."""


class MeshFormatError(ShapeflowError):
    """Malformed mesh file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshTopologyError(ShapeflowError):
    """Mesh connectivity violates an invariant (open chains, bad adjacency)."""


class GenerationError(ShapeflowError):
    """Mesh generation produced an invalid mesh."""


class NumericalError(ShapeflowError):
    """A linear solve or iteration failed to converge."""


class SamplingError(ShapeflowError):
    """Random sampling failed (rejection cap exceeded)."""


class EvaluationError(ShapeflowError):
    """Point evaluation outside the source mesh domain."""

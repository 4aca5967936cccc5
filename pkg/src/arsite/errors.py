"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """Malformed input file (PGM, OBJ, JSON schema)."""


class GeometryError(ValueError):
    """Degenerate or invalid geometry (collinear points, bad rotation, ...)."""


class ProjectionError(GeometryError):
    """Point cannot be projected (at or behind the camera plane)."""


class SceneError(ValueError):
    """Synthetic scene violates a validity constraint."""


class RegistryError(ValueError):
    """Base class for site registry failures."""


class ConflictError(RegistryError):
    """Registry update would break a uniqueness constraint."""


class ValidationError(RegistryError):
    """Registry record rejected by field validation."""


class LockContentionError(RuntimeError):
    """Another process holds the site lock."""

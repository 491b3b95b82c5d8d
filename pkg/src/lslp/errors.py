"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is an ordinary crash.
"""


class LslpError(Exception):
    """Base class for package errors."""


class ConfigError(LslpError):
    """Invalid or inconsistent configuration."""


class DataError(LslpError):
    """Dataset, manifest, or tensor-file problem."""


class GraphError(LslpError):
    """Autodiff graph misuse (shape mismatch, backward before forward, ...)."""


class GeometryError(LslpError):
    """Invalid grid construction or out-of-bounds coverage query."""


class NumericError(LslpError):
    """Non-finite value where the contract requires finiteness."""

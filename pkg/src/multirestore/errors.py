"""Exception types shared across the package.

Argument errors use the builtin ``ValueError``; lookups of unknown task ids
raise ``KeyError``.
"""


class ShapeError(ValueError):
    """A tensor does not have the shape an operation requires."""


class ConfigurationError(Exception):
    """Invalid or missing configuration (CLI exit code 2)."""


class StateError(RuntimeError):
    """A required artifact or training state is missing (CLI exit code 3)."""


class RegistryError(KeyError):
    """A task id is already registered."""

"""Prompt-conditioned diffusion-prior image restoration at toy scale."""

from multirestore.errors import (
    ConfigurationError,
    RegistryError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "RegistryError",
    "ShapeError",
    "StateError",
    "__version__",
]

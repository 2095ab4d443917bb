"""Exporter-specific errors; subclasses of the primary package's base error."""

from cosoc.errors import CosocError


class MissingImage(CosocError):
    """A plan image id does not resolve to exactly one file."""


class PluginLoadError(CosocError):
    """The requested embedding model plugin cannot be resolved."""


class ShapeMismatch(CosocError):
    """The model returned vectors whose count or dimension is inconsistent."""

"""Bridge real images into the cosoc feature-store interchange format."""

__version__ = "0.1.0"

from .export import ExportManifest, export_features, pixel_box, verify_roundtrip
from .plugins import BUILTIN_MODELS, resolve_model

__all__ = [
    "__version__",
    "ExportManifest",
    "export_features",
    "pixel_box",
    "verify_roundtrip",
    "BUILTIN_MODELS",
    "resolve_model",
]

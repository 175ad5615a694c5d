"""Feature exporter: patch encoders in, .fbag files out."""

from .encoders import (
    KNOWN_ENCODERS,
    EncoderLoadError,
    EncoderSpec,
    ExporterError,
    NullEncoder,
    load_encoder,
    resolve_spec,
)
from .export import export_bag, extract_patches

__version__ = "0.1.0"

__all__ = [
    "EncoderLoadError",
    "EncoderSpec",
    "ExporterError",
    "KNOWN_ENCODERS",
    "NullEncoder",
    "export_bag",
    "extract_patches",
    "load_encoder",
    "resolve_spec",
]

"""Embedding extractor emitting OVPE region/text files for the ovps toolkit."""

__version__ = "0.1.0"

from .encoders import ClipEncoder, ColorSignatureEncoder, build_encoder
from .jobs import (
    DEFAULT_TEMPLATES,
    ExtractionConfigError,
    ExtractionJob,
    extract_regions,
    extract_text,
)
from .writer import StreamingOvpeWriter

__all__ = [
    "ClipEncoder",
    "ColorSignatureEncoder",
    "DEFAULT_TEMPLATES",
    "ExtractionConfigError",
    "ExtractionJob",
    "StreamingOvpeWriter",
    "build_encoder",
    "extract_regions",
    "extract_text",
]

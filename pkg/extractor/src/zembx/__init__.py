"""Encoder bridge writing ZEMB tensor files from prompts and image crops."""

__version__ = "0.1.0"

from .jobs import CropSpec, ExtractionJob, extract_crops, extract_text, read_manifest  # noqa: F401
from .templates import BUILTIN_TEMPLATE_SETS, RESISC45_TEMPLATES  # noqa: F401

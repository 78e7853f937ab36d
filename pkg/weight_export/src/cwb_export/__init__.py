"""One-shot converter from pretrained MAT weight archives to CWB files."""

__version__ = "0.1.0"

from .convert import ExportError, ExportManifest, export, verify  # noqa: F401

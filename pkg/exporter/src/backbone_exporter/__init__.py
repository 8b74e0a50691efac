"""Convert torchvision classifier backbones into frozen feature-extractor graphs."""

from .errors import ExporterError, InputError, ValidationError
from .export import ExportResult, ExportSpec, export_backbone, structural_hash
from .trace import ARCHITECTURES, INPUT_SHAPE

__all__ = [
    "ARCHITECTURES",
    "INPUT_SHAPE",
    "ExporterError",
    "ExportResult",
    "ExportSpec",
    "InputError",
    "ValidationError",
    "export_backbone",
    "structural_hash",
]

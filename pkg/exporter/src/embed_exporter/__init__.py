"""Offline embedding exporter producing PCE1 datasets for the classifier."""

from .encoders import ClipEncoder, HashEncoder, load_encoder
from .errors import EmptyClassFolder, ExporterError, MissingWeights, UnknownBackbone
from .export import ExportJob, export, read_templates, render_prompt

__version__ = "0.1.0"

__all__ = [
    "ClipEncoder",
    "EmptyClassFolder",
    "ExportJob",
    "ExporterError",
    "HashEncoder",
    "MissingWeights",
    "UnknownBackbone",
    "export",
    "load_encoder",
    "read_templates",
    "render_prompt",
]

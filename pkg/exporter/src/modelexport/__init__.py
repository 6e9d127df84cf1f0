"""Torch checkpoint exporter and fixture builder for the quantization toolkit."""

from .fixtures import ACCURACY_FLOORS, FIXTURE_KINDS, make_fixture, render_digits
from .formats import (
    ExportError,
    write_calibration_dir,
    write_golden,
    write_model_dir,
)
from .torch_export import (
    ExportManifest,
    convert_sequential,
    export_model,
    golden_forward,
    load_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ACCURACY_FLOORS",
    "ExportError",
    "ExportManifest",
    "FIXTURE_KINDS",
    "convert_sequential",
    "export_model",
    "golden_forward",
    "load_checkpoint",
    "make_fixture",
    "render_digits",
    "write_calibration_dir",
    "write_golden",
    "write_model_dir",
]

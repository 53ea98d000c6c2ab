"""One-directional bridge from torch checkpoints to DMB pruning bundles."""

from .dmb import (ExportError, read_calibration, write_gradient_bundle,
                  write_model_bundle)
from .export import (export_checkpoint, load_calibration_file,
                     per_sample_gradients, probe_flops, select_layers)
from .toy import (ToyDetector, build_toy_model, load_checkpoint,
                  save_toy_checkpoint, toy_calibration)

__all__ = [
    "ExportError",
    "ToyDetector",
    "build_toy_model",
    "export_checkpoint",
    "load_calibration_file",
    "load_checkpoint",
    "per_sample_gradients",
    "probe_flops",
    "read_calibration",
    "save_toy_checkpoint",
    "select_layers",
    "toy_calibration",
    "write_gradient_bundle",
    "write_model_bundle",
]

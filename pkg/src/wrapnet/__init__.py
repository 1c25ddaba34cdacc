"""Quantized inference with low-bit wrap-around accumulators.

Subpackages: ``fxp`` (fixed-point tensors and wrapping arithmetic),
``cyclic`` (periodic activations), ``packing`` (SWAR lanes and carry
accounting), ``kernels`` (integer GEMM/conv), ``netgraph`` (model
manifests, forward pass, calibration) and ``train`` (desk-scale training).
"""
__version__ = "0.1.0"

from .cyclic import CyclicSpec, cyclic_apply, cyclic_derivative
from .errors import (CalibrationError, ChecksumError, ConfigError, DegenerateScaleError,
                     DivergenceError, InvalidSchemeError, ManifestVersionError, RangeError,
                     SchemeMismatchError, ShapeMismatchError, SpecMismatchError, WrapnetError)
from .fxp import FixedTensor, QuantScheme, wrap
from .kernels import AccMode, conv2d, gemm
from .netgraph import ModelManifest, forward, load_model, save_model

__all__ = [
    "AccMode", "CalibrationError", "ChecksumError", "ConfigError", "CyclicSpec",
    "DegenerateScaleError", "DivergenceError", "FixedTensor", "InvalidSchemeError",
    "ManifestVersionError", "ModelManifest", "QuantScheme", "RangeError", "SchemeMismatchError",
    "ShapeMismatchError", "SpecMismatchError", "WrapnetError", "__version__", "conv2d",
    "cyclic_apply", "cyclic_derivative", "forward", "gemm", "load_model", "save_model", "wrap",
]

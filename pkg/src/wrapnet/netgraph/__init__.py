"""Sequential quantized models: forward pass, calibration and manifests."""
from .calibrate import (
    Calibration,
    activation_bits,
    calibrate_carry_means,
    calibrate_model,
    calibrate_shared,
    carry_counts,
    calibrate_step_size,
    model_overflow_penalty,
    overflow_fraction,
    overflow_penalty,
    overflow_rate,
)
from .io import load_model, load_tensor, save_model, save_tensor
from .model import (
    MANIFEST_VERSION,
    LayerSpec,
    ModelManifest,
    check_consistency,
    forward,
    forward_block,
    layer_inputs,
    predict,
)

__all__ = [
    "Calibration", "LayerSpec", "MANIFEST_VERSION", "ModelManifest", "activation_bits",
    "calibrate_carry_means", "calibrate_model", "calibrate_shared", "calibrate_step_size", "carry_counts", "check_consistency",
    "forward", "forward_block", "layer_inputs", "load_model", "load_tensor",
    "model_overflow_penalty", "overflow_fraction", "overflow_penalty", "overflow_rate",
    "predict", "save_model", "save_tensor",
]

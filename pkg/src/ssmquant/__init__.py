"""Post-training quantization toolkit for a toy selective state-space (Mamba) model.

Rotations (Hadamard and KLT-enhanced), smoothing fusion, online Hadamard hooks
and uniform affine fake quantization, each verified to preserve the model
function before quantization.
"""

from .calibration import CalibStats, collect_stats, smoothing_factors
from .model import MambaModel, ModelConfig, init_model, model_forward
from .quant import QuantConfig, fake_quant, quantize_weight
from .rotation import fwht_apply, hadamard, klt_enhanced
from .tensor import channel_stats, jacobi_eigh
from .transform import apply_plan, build_plan, equivalence_check, quantize_model, transform_model

__version__ = "0.1.0"

__all__ = [
    "CalibStats", "collect_stats", "smoothing_factors",
    "MambaModel", "ModelConfig", "init_model", "model_forward",
    "QuantConfig", "fake_quant", "quantize_weight",
    "fwht_apply", "hadamard", "klt_enhanced",
    "channel_stats", "jacobi_eigh",
    "apply_plan", "build_plan", "equivalence_check", "quantize_model", "transform_model",
]

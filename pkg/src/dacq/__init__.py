"""Distribution-aware companding quantization (DACQ) for LLM weight matrices."""

from .grids import GroupStats, QuantGrid, hybrid_levels, logistic_levels, uniform_levels
from .quantizer import QuantConfig, dequantize, quantize_tensor
from .tensorio import (
    CalibrationSet,
    QuantizedTensor,
    WeightTensor,
    load_quantized,
    load_tensor,
    save_quantized,
    save_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationSet",
    "GroupStats",
    "QuantConfig",
    "QuantGrid",
    "QuantizedTensor",
    "WeightTensor",
    "dequantize",
    "hybrid_levels",
    "load_quantized",
    "load_tensor",
    "logistic_levels",
    "quantize_tensor",
    "save_quantized",
    "save_tensor",
    "uniform_levels",
]

"""Bidirectional-Mamba U-Net for single-channel speech separation.

numpy for the tensor algebra and autodiff, numba for the scan kernels
(``SEPM_DISABLE_NUMBA=1`` selects the pure-numpy fallback).
"""

from .errors import ConfigError, DataError, DomainError, NumericalError, SepMambaError, ShapeError
from .numerics import Precision, Tensor, backward, no_grad
from .objective import si_sdr, si_sdr_improvement, upit_loss
from .separator import PRESETS, SEPMAMBA_M, SEPMAMBA_S, ModelWeights, SeparatorConfig, build, count_macs, count_params, forward, separate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "ModelWeights",
    "NumericalError",
    "PRESETS",
    "Precision",
    "SEPMAMBA_M",
    "SEPMAMBA_S",
    "SepMambaError",
    "SeparatorConfig",
    "ShapeError",
    "Tensor",
    "backward",
    "build",
    "count_macs",
    "count_params",
    "forward",
    "no_grad",
    "separate",
    "si_sdr",
    "si_sdr_improvement",
    "upit_loss",
]

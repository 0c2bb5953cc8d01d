"""Model-based identification of IQ-imbalance and power-amplifier cascades
for full-duplex self-interference cancellation."""

from .estimation import WlmpModel, expand_to_wlmp, fit_wlmp
from .layers import Cascade, MemoryPolynomialLayer, WidelyLinearLayer, make_iq_pa_model
from .metrics import cancellation_db
from .numerics import ComplexSignal, RngStream
from .training import ModelSpec, TrainingConfig, run_multi_init, train

__version__ = "0.1.0"

__all__ = [
    "Cascade",
    "ComplexSignal",
    "MemoryPolynomialLayer",
    "ModelSpec",
    "RngStream",
    "TrainingConfig",
    "WidelyLinearLayer",
    "WlmpModel",
    "cancellation_db",
    "expand_to_wlmp",
    "fit_wlmp",
    "make_iq_pa_model",
    "run_multi_init",
    "train",
]

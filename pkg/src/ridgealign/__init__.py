"""Single-step fingerprint registration: semi-dense local feature matching
with global-local attention, regularized thin-plate-spline warping, training
losses, and biometric evaluation metrics."""

from .config import ModelConfig, TOY
from .weights import WeightArchive, init_weights

__all__ = ["ModelConfig", "TOY", "WeightArchive", "init_weights"]
__version__ = "0.1.0"

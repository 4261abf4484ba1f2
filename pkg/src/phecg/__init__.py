"""phecg: parameterised hypercomplex layers and 1D CNNs for ECG AF analysis."""

from . import autodiff, backbones, ecgdata, layers, metrics, ndtensor, training
from .errors import ConfigError, DataError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "backbones",
    "ecgdata",
    "layers",
    "metrics",
    "ndtensor",
    "training",
    "ConfigError",
    "DataError",
    "NumericError",
    "ShapeError",
]

"""Real-time scale-robust glottis instance segmentation at desk scale."""

from .errors import ConfigError, DataError, GraphError, NumericError
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ConfigError",
    "DataError",
    "GraphError",
    "NumericError",
    "__version__",
]

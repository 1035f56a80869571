"""Hierarchical hypergraph transformer for multivariate time series, on a small numpy autodiff core."""

from .errors import ConfigError, DataError, DivergenceError, FormatError, HGTSError, IntegrityError, NumericError, ShapeError
from .model import HGTSFormer, ModelConfig, count_parameters

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "FormatError",
    "HGTSError",
    "HGTSFormer",
    "IntegrityError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "count_parameters",
    "__version__",
]

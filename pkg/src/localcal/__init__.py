"""Local calibration toolkit for multiclass classifiers."""

__version__ = "0.1.0"

from .dataset import CalibrationDataset, SplitSpec, load_dataset, save_dataset, split
from .errors import DataError, LocalCalError, NumericalError
from .kernels import KernelConfig
from .binning import BinningScheme
from .metrics import MetricConfig, evaluate

__all__ = [
    "BinningScheme",
    "CalibrationDataset",
    "DataError",
    "KernelConfig",
    "LocalCalError",
    "MetricConfig",
    "NumericalError",
    "SplitSpec",
    "__version__",
    "evaluate",
    "load_dataset",
    "save_dataset",
    "split",
]

"""Class-specific filter clustering for interpretable CNNs, on a small numpy autodiff engine."""

from .autodiff import Adam, Parameter, Tensor, backward
from .backbone import BackboneConfig
from .data import Dataset, MotifSpec, load_idx, make_splits, write_idx
from .harness import DataConfig, RunConfig, RunResult, SweepResult, run_experiment
from .metrics import MetricsReport, evaluate
from .model import PICNN

__version__ = "0.1.0"

__all__ = [
    "Adam", "Parameter", "Tensor", "backward", "BackboneConfig", "Dataset", "MotifSpec", "load_idx",
    "make_splits", "write_idx", "DataConfig", "RunConfig", "RunResult", "SweepResult", "run_experiment",
    "MetricsReport", "evaluate", "PICNN",
]

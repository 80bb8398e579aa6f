"""Offline model-based optimization with an amortized conditional-NML
uncertainty model, exact desk-scale oracles, and baselines."""

from . import bench, cli, cnml, estimators, models, numerics, optimizer, quantization

__all__ = [
    "bench",
    "cli",
    "cnml",
    "estimators",
    "models",
    "numerics",
    "optimizer",
    "quantization",
]

__version__ = "0.1.0"

"""Deterministic federated trainer for deep ReLU regression networks.

Simulates K clients running Local GD or Local SGD with periodic model
averaging, and instruments the quantities that drive the convergence
analysis (drift, deviation, gradient ratios, loss shrinkage, per-round
rates).
"""

__version__ = "0.1.0"

from .data import Dataset, Partition, Shard, gen_separable, load_idx, min_pairwise_distance
from .federated import FedConfig, FedState, MetricsLog, ProbeSchedule, default_lr, run
from .network import NetConfig, Params, forward, gradient, init_params, loss
from .numerics import RngStream, frobenius_norm, gaussian_matrix, matmul, spectral_norm

__all__ = [
    "Dataset",
    "FedConfig",
    "FedState",
    "MetricsLog",
    "NetConfig",
    "Params",
    "Partition",
    "ProbeSchedule",
    "RngStream",
    "Shard",
    "default_lr",
    "forward",
    "frobenius_norm",
    "gaussian_matrix",
    "gen_separable",
    "gradient",
    "init_params",
    "load_idx",
    "loss",
    "matmul",
    "min_pairwise_distance",
    "run",
    "spectral_norm",
    "__version__",
]

"""Federated aggregation of LoRA adapters: FedAvg, freeze-A and full-rank SVD aggregation."""

from .aggregation import (AggregateOutcome, ClientUpdate, aggregate_fedavg, aggregate_ffa,
                          aggregate_fra, fedavg_error, fra_truncation_error)
from .config import ExperimentConfig
from .fedsim import Federation, RoundRecord, run_federation
from .linalg import SvdResult, svd, truncated_svd
from .lora import FrozenLayer, LoraAdapter, delta_w, init_adapter, merge
from .privacy import NoiseSpec, dp_per_adapter, dp_post_aggregation, noise_matrix

__version__ = "0.1.0"

__all__ = [
    "AggregateOutcome", "ClientUpdate", "ExperimentConfig", "Federation", "FrozenLayer",
    "LoraAdapter", "NoiseSpec", "RoundRecord", "SvdResult", "aggregate_fedavg", "aggregate_ffa",
    "aggregate_fra", "delta_w", "dp_per_adapter", "dp_post_aggregation", "fedavg_error",
    "fra_truncation_error", "init_adapter", "merge", "noise_matrix", "run_federation", "svd",
    "truncated_svd",
]

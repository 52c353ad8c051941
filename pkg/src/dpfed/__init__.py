"""Differentially private federated learning simulator.

Laplace-privatized client updates, adaptive per-round privacy budgets, and
federated averaging over a small dense classifier.
"""
from dpfed.budget import BudgetSchedule, learning_progress, next_round_epsilon, normalize_allocations
from dpfed.config import FederationConfig, load_config, parse_config
from dpfed.data import Dataset, PartitionPlan, generate_blobs, partition
from dpfed.federation import AggregationRule, RoundRecord, aggregate, local_update, run_round, run_training
from dpfed.kernels import BACKEND
from dpfed.mechanism import (
    Clipped,
    NoiseReceipt,
    PaperFaithful,
    PrivacySpec,
    laplace_sample,
    noise_audit,
    privatize_update,
    risk_bound,
)
from dpfed.model import EvalMetrics, MlpSpec, ParamVector, TrainingBatch, evaluate, forward, grad, init_params, loss

__version__ = "0.1.0"

__all__ = [
    "AggregationRule",
    "BACKEND",
    "BudgetSchedule",
    "Clipped",
    "Dataset",
    "EvalMetrics",
    "FederationConfig",
    "MlpSpec",
    "NoiseReceipt",
    "PaperFaithful",
    "ParamVector",
    "PartitionPlan",
    "PrivacySpec",
    "RoundRecord",
    "TrainingBatch",
    "aggregate",
    "evaluate",
    "forward",
    "generate_blobs",
    "grad",
    "init_params",
    "laplace_sample",
    "learning_progress",
    "load_config",
    "local_update",
    "loss",
    "next_round_epsilon",
    "noise_audit",
    "normalize_allocations",
    "parse_config",
    "partition",
    "privatize_update",
    "risk_bound",
    "run_round",
    "run_training",
]

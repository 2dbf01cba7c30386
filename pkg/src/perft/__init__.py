"""Routed parameter-efficient adapters for mixture-of-experts layers, on a small numpy autodiff core."""

from .adapters import BottleneckAdapter, adapter_forward, adapter_param_count, init_adapter
from .analysis import (CountDims, ParamReport, VectorBundle, count_params, enumerate_activated, extract_vectors,
                       pca_project, routing_stats)
from .core import Matrix, NonFiniteError, Rng, ShapeError, grad_check, load_matrix, dump_matrix
from .moe import ConfigError, MoeLayerConfig, load_balance_loss, moe_forward, route, router_z_loss
from .strategies import PeftStrategyConfig, PerftModel, build_model, layer_forward, with_strategy
from .training import SyntheticTaskSpec, TrainConfig, evaluate, generate_task, train

__version__ = "0.1.0"

__all__ = [
    "BottleneckAdapter", "ConfigError", "CountDims", "Matrix", "MoeLayerConfig", "NonFiniteError",
    "ParamReport", "PeftStrategyConfig", "PerftModel", "Rng", "ShapeError", "SyntheticTaskSpec",
    "TrainConfig", "VectorBundle", "adapter_forward", "adapter_param_count", "build_model", "count_params",
    "dump_matrix", "enumerate_activated", "evaluate", "extract_vectors", "generate_task", "grad_check",
    "init_adapter", "layer_forward", "load_balance_loss", "load_matrix", "moe_forward", "pca_project",
    "route", "router_z_loss", "routing_stats", "train", "with_strategy",
]

"""Deterministic federated-learning simulator with dual low-rank adapters,
bidirectional distillation, gate pruning and communication accounting."""

__version__ = "0.1.0"

from .adapter import (AdapterGrads, LoraAdapter, apply_delta, init_adapter,
                      param_count, proximal_gate_step, soft_threshold)
from .config import RunConfig, load_config
from .data import EmbeddingDataset, Partition, dirichlet_partition, generate_synthetic
from .federation import (ServerState, aggregate, comm_to_target, initialize_run,
                         run_experiment, run_round)
from .metrics import RoundMetrics, emit_csv, summarize
from .model import ForwardTrace, FrozenHead, forward, global_loss, local_loss, predict
from .training import (ClientState, OptimState, adamw_step, evaluate_client,
                       train_client_round)

__all__ = [
    "AdapterGrads", "ClientState", "EmbeddingDataset", "ForwardTrace",
    "FrozenHead", "LoraAdapter", "OptimState", "Partition", "RoundMetrics",
    "RunConfig", "ServerState", "adamw_step", "aggregate", "apply_delta",
    "comm_to_target", "dirichlet_partition", "emit_csv", "evaluate_client",
    "forward", "generate_synthetic", "global_loss", "init_adapter",
    "initialize_run", "load_config", "local_loss", "param_count", "predict",
    "proximal_gate_step", "run_experiment", "run_round", "soft_threshold",
    "summarize", "train_client_round",
]

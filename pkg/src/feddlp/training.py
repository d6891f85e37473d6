"""Per-client local training.

Each batch runs up to two phases: the private local adapter is updated
with the global adapter frozen (cross-entropy plus weighted distillation,
then the proximal gate step), and the working global adapter is updated
with the local adapter frozen.  Single-adapter baseline modes collapse to
one cross-entropy phase.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import seeding
from .adapter import LoraAdapter, init_adapter, merge_adapters, proximal_gate_step
from .config import RunConfig
from .data import EmbeddingDataset
from .errors import ContractError, EvaluationError
from .model import FrozenHead, loss_and_grads, predict_batch

logger = logging.getLogger(__name__)

DUAL_MODES = ("feddlp",)
LOCAL_MODES = ("feddlp", "local_only", "local_only_pruned")
SHARED_MODES = ("homogeneous_lora", "combined")
COMMUNICATING_MODES = ("feddlp", "homogeneous_lora", "combined")


@dataclass
class OptimState:
    """AdamW accumulators for a named set of parameter arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_shapes(cls, shapes: dict[str, tuple], weight_decay: float = 0.0) -> "OptimState":
        return cls(
            m={k: np.zeros(s) for k, s in shapes.items()},
            v={k: np.zeros(s) for k, s in shapes.items()},
            weight_decay=weight_decay,
        )


def adamw_step(state: OptimState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"shape mismatch for {name!r}: {g.shape} vs {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _adapter_opt(rank: int, d_in: int, d_out: int, weight_decay: float) -> OptimState:
    return OptimState.for_shapes(
        {"down": (rank, d_in), "up": (d_out, rank)}, weight_decay)


@dataclass
class ClientState:
    """One client's shard, private adapter, working global copy and optimizers."""

    client_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    dataset: EmbeddingDataset
    local: LoraAdapter | None = None
    global_adapter: LoraAdapter | None = None
    opt_local: OptimState | None = None
    opt_global: OptimState | None = None


def shared_rank(cfg: RunConfig) -> int:
    """Rank of the adapter that crosses the wire in a given mode."""
    if cfg.mode == "homogeneous_lora":
        return cfg.rank_local
    if cfg.mode == "combined":
        return cfg.rank_local + cfg.rank_global
    return cfg.rank_global


def make_client(cfg: RunConfig, dataset: EmbeddingDataset, client_id: int,
                train_idx: np.ndarray, test_idx: np.ndarray) -> ClientState:
    d = dataset.d
    client = ClientState(client_id, np.asarray(train_idx), np.asarray(test_idx), dataset)
    if cfg.mode in LOCAL_MODES:
        gated = cfg.mode in ("feddlp", "local_only_pruned")
        client.local = init_adapter(
            cfg.rank_local, d, d, gated,
            seeding.derive_seed(cfg.seed, seeding.LOCAL_INIT, client_id))
        client.opt_local = _adapter_opt(cfg.rank_local, d, d, cfg.weight_decay)
    if cfg.mode in COMMUNICATING_MODES:
        client.opt_global = _adapter_opt(shared_rank(cfg), d, d, cfg.weight_decay)
    return client


def train_local_phase(client: ClientState, head: FrozenHead, xb: np.ndarray,
                      yb: np.ndarray, cfg: RunConfig) -> float:
    """Phase A: update the private adapter; the global adapter only teaches."""
    teacher = client.global_adapter if cfg.mode == "feddlp" else None
    kd = cfg.kd_alpha if teacher is not None else 0.0
    loss, grads = loss_and_grads(head, client.local, xb, yb,
                                 teacher=teacher, kd_weight=kd,
                                 kd_direction=cfg.kd_direction)
    adamw_step(client.opt_local,
               {"down": client.local.down, "up": client.local.up},
               {"down": grads.d_down, "up": grads.d_up}, cfg.lr_local)
    if client.local.gate is not None:
        proximal_gate_step(client.local, grads.d_gate, cfg.effective_gate_lr,
                           cfg.xi, cfg.threshold_mode)
    return loss


def train_global_phase(client: ClientState, head: FrozenHead, xb: np.ndarray,
                       yb: np.ndarray, cfg: RunConfig) -> float:
    """Phase B: update the working global adapter; the local one is frozen."""
    loss, grads = loss_and_grads(head, client.global_adapter, xb, yb,
                                 teacher=client.local, kd_weight=1.0,
                                 kd_direction=cfg.kd_direction)
    adamw_step(client.opt_global,
               {"down": client.global_adapter.down, "up": client.global_adapter.up},
               {"down": grads.d_down, "up": grads.d_up}, cfg.lr_global)
    return loss


def train_shared_phase(client: ClientState, head: FrozenHead, xb: np.ndarray,
                       yb: np.ndarray, cfg: RunConfig) -> float:
    """Single-adapter baselines: plain cross-entropy on the shared adapter."""
    loss, grads = loss_and_grads(head, client.global_adapter, xb, yb)
    adamw_step(client.opt_global,
               {"down": client.global_adapter.down, "up": client.global_adapter.up},
               {"down": grads.d_down, "up": grads.d_up}, cfg.lr_local)
    return loss


def train_client_round(client: ClientState, head: FrozenHead,
                       globals_in: LoraAdapter | None, cfg: RunConfig,
                       round_idx: int) -> LoraAdapter | None:
    """One communication round of local work; returns the upload, if any."""
    communicating = cfg.mode in COMMUNICATING_MODES
    if communicating:
        if globals_in is None:
            raise ContractError(f"mode {cfg.mode} requires a broadcast adapter")
        if client.global_adapter is not None and not globals_in.same_structure(client.global_adapter):
            raise ContractError("broadcast adapter does not match the client slot")
        client.global_adapter = globals_in.copy()

    if len(client.train_idx) == 0:
        logger.warning("client %d has an empty train shard in round %d; skipping",
                       client.client_id, round_idx)
        return None

    if cfg.mode == "feddlp":
        phases = (train_local_phase, train_global_phase)
    elif cfg.mode in SHARED_MODES:
        phases = (train_shared_phase,)
    else:
        phases = (train_local_phase,)

    rng = seeding.derive_rng(cfg.seed, seeding.BATCHES, client.client_id, round_idx)
    xs = client.dataset.embeddings
    ys = client.dataset.labels
    for _ in range(cfg.local_epochs):
        order = rng.permutation(client.train_idx)
        batches = [order[i:i + cfg.batch_size]
                   for i in range(0, len(order), cfg.batch_size)]
        if cfg.alternation == "per_batch":
            for batch in batches:
                for phase in phases:
                    phase(client, head, xs[batch], ys[batch], cfg)
        else:
            for phase in phases:
                for batch in batches:
                    phase(client, head, xs[batch], ys[batch], cfg)

    return client.global_adapter.copy() if communicating else None


def inference_adapter(client: ClientState, cfg: RunConfig) -> LoraAdapter:
    """Adapter used at evaluation time; mode-based unless overridden."""
    choice = cfg.eval_adapter
    if choice == "auto":
        choice = "local" if cfg.mode in LOCAL_MODES else "global"
    if choice == "local":
        ad = client.local
    elif choice == "global":
        ad = client.global_adapter
    else:
        if client.local is None or client.global_adapter is None:
            raise ContractError("eval_adapter=sum needs both adapters")
        return merge_adapters(client.local, client.global_adapter)
    if ad is None:
        raise ContractError(f"no {choice} adapter available in mode {cfg.mode}")
    return ad


def evaluate_client(client: ClientState, head: FrozenHead, cfg: RunConfig) -> float:
    """Fraction of the client's own test shard classified correctly."""
    if len(client.test_idx) == 0:
        raise EvaluationError(f"client {client.client_id} has an empty test shard")
    ad = inference_adapter(client, cfg)
    preds = predict_batch(head, ad, client.dataset.embeddings[client.test_idx])
    return float(np.mean(preds == client.dataset.labels[client.test_idx]))

"""Server-side orchestration: broadcast, client rounds, weighted
aggregation of the shared adapters and byte-exact traffic accounting.

Only structurally identical, gateless adapters ever cross the wire; the
pruned local adapters stay on their clients.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .adapter import LoraAdapter, init_adapter, param_count, serialize
from .config import RunConfig
from .data import (EmbeddingDataset, dirichlet_partition, generate_synthetic,
                   load_embeddings, split_train_test)
from .errors import AggregationError, ContractError, FedDlpError
from .metrics import RoundMetrics
from .model import FrozenHead
from .training import (COMMUNICATING_MODES, ClientState, evaluate_client,
                       make_client, shared_rank, train_client_round)

logger = logging.getLogger(__name__)


@dataclass
class ServerState:
    global_adapter: LoraAdapter | None
    sample_counts: list[int]
    round_index: int = 0
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    log: list[RoundMetrics] = field(default_factory=list)

    @property
    def cum_bytes(self) -> int:
        return self.uplink_bytes + self.downlink_bytes


def aggregate(updates: list[tuple[int, LoraAdapter, int]]) -> LoraAdapter:
    """Sample-count-weighted elementwise mean of structurally identical,
    gateless adapters.  Summation runs in ascending client id so the result
    is independent of the order updates arrive in."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    updates = sorted(updates, key=lambda entry: entry[0])
    first = updates[0][1]
    total = 0
    for cid, ad, count in updates:
        if ad.gate is not None:
            raise AggregationError(f"client {cid}: gated adapters cannot be aggregated")
        if not ad.same_structure(first):
            raise AggregationError(
                f"client {cid}: adapter structure ({ad.rank}, {ad.d_in}, {ad.d_out}) "
                f"differs from ({first.rank}, {first.d_in}, {first.d_out})")
        if count < 0:
            raise AggregationError(f"client {cid}: negative sample count")
        total += count
    if total <= 0:
        raise AggregationError("no update with a positive sample count")
    down = np.zeros_like(first.down)
    up = np.zeros_like(first.up)
    for _, ad, count in updates:
        w = count / total
        down += w * ad.down
        up += w * ad.up
    return LoraAdapter(first.rank, first.d_in, first.d_out, down, up, None)


def _client_round(client: ClientState, head: FrozenHead,
                  broadcast: LoraAdapter | None, cfg: RunConfig,
                  round_idx: int) -> LoraAdapter | None:
    try:
        return train_client_round(client, head, broadcast, cfg, round_idx)
    except FedDlpError as exc:
        raise type(exc)(f"client {client.client_id}: {exc}") from exc


def run_round(server: ServerState, clients: list[ClientState],
              head: FrozenHead, cfg: RunConfig) -> RoundMetrics:
    """Broadcast, parallel client phase, aggregation, evaluation, metrics."""
    round_idx = server.round_index
    communicating = cfg.mode in COMMUNICATING_MODES
    mult = cfg.layer_multiplier

    broadcast = None
    if communicating:
        server.downlink_bytes += len(clients) * len(serialize(server.global_adapter)) * mult
        broadcast = server.global_adapter

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            uploads = list(pool.map(
                lambda c: _client_round(c, head, broadcast, cfg, round_idx), clients))
    else:
        uploads = [_client_round(c, head, broadcast, cfg, round_idx) for c in clients]

    if communicating:
        entries = []
        for client, upload in zip(clients, uploads):
            if upload is None:
                continue
            server.uplink_bytes += len(serialize(upload)) * mult
            entries.append((client.client_id, upload, len(client.train_idx)))
        positive = [e for e in entries if e[2] > 0]
        if positive:
            server.global_adapter = aggregate(positive)
        else:
            logger.warning("round %d: no positive-weight uploads; keeping previous "
                           "global adapter", round_idx)
        # All working copies already match the upload; nothing else to push.

    accuracies = []
    eff_params = []
    for client in clients:
        if len(client.test_idx) == 0:
            logger.warning("client %d has no test shard; excluded from metrics",
                           client.client_id)
            accuracies.append(float("nan"))
        else:
            accuracies.append(evaluate_client(client, head, cfg))
        trained = client.local if client.local is not None else client.global_adapter
        eff_params.append(param_count(trained, effective=True) if trained is not None else 0)

    record = RoundMetrics.from_accuracies(round_idx, accuracies, eff_params,
                                          server.cum_bytes)
    server.log.append(record)
    server.round_index += 1
    return record


def comm_to_target(log: list[RoundMetrics], target_acc: float) -> int | None:
    """Cumulative bytes at the first round whose mean accuracy reaches the
    target; None when the target is never reached."""
    if not log:
        raise ContractError("comm_to_target on an empty log")
    for record in log:
        if record.mean >= target_acc:
            return record.cum_bytes
    return None


def build_dataset(cfg: RunConfig) -> EmbeddingDataset:
    if cfg.embeddings_path is not None:
        return load_embeddings(cfg.embeddings_path)
    return generate_synthetic(cfg.synthetic_k, cfg.synthetic_d, cfg.synthetic_n,
                              cfg.synthetic_noise,
                              seeding.derive_seed(cfg.seed, seeding.DATA))


def build_head(cfg: RunConfig, dataset: EmbeddingDataset) -> FrozenHead:
    """Frozen head for a run.

    With ``head_distortion > 0`` the projection leaks each of the first
    ``head_distortion_rank`` class directions into the prototype half a
    class-cycle away, modelling a frozen encoder whose raw features are
    misaligned with the prototypes.  Adapters can invert the leak because
    it is low rank; the identity default keeps the projection transparent.
    """
    w0 = np.eye(dataset.d)
    if cfg.head_distortion > 0.0 and cfg.head_distortion_rank > 0:
        protos = dataset.prototypes
        k = dataset.k
        for j in range(min(cfg.head_distortion_rank, k)):
            src, dst = j, (j + k // 2) % k
            w0 += cfg.head_distortion * np.outer(protos[dst], protos[src])
    return FrozenHead(w0, dataset.prototypes, cfg.tau)


def initialize_run(cfg: RunConfig, dataset: EmbeddingDataset | None = None,
                   ) -> tuple[ServerState, list[ClientState], FrozenHead]:
    """Partition the data, build clients, the frozen head and the server."""
    if dataset is None:
        dataset = build_dataset(cfg)
    partition = dirichlet_partition(dataset.labels, cfg.n_clients, cfg.beta,
                                    seeding.derive_seed(cfg.seed, seeding.PARTITION))
    clients = []
    empty = np.empty(0, dtype=np.int64)
    for cid, shard in enumerate(partition.assignments):
        if len(shard):
            train_idx, test_idx = split_train_test(
                shard, cfg.train_ratio,
                seeding.derive_seed(cfg.seed, seeding.SPLIT, cid))
        else:
            train_idx, test_idx = empty, empty
        clients.append(make_client(cfg, dataset, cid, train_idx, test_idx))

    head = build_head(cfg, dataset)
    global_adapter = None
    if cfg.mode in COMMUNICATING_MODES:
        global_adapter = init_adapter(
            shared_rank(cfg), dataset.d, dataset.d, False,
            seeding.derive_seed(cfg.seed, seeding.GLOBAL_INIT))
    server = ServerState(global_adapter=global_adapter,
                         sample_counts=[len(c.train_idx) for c in clients])
    return server, clients, head


def run_experiment(cfg: RunConfig, dataset: EmbeddingDataset | None = None) -> ServerState:
    """Full configured run; the server's log holds one record per round."""
    cfg.validate()
    server, clients, head = initialize_run(cfg, dataset)
    for _ in range(cfg.rounds):
        record = run_round(server, clients, head, cfg)
        logger.info("round %3d | mean acc %.4f | lowest %.4f | %.2f MB",
                    record.round_index, record.mean, record.lowest,
                    record.cum_bytes / 1e6)
    return server

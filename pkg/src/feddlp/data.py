"""Embedding datasets, non-IID Dirichlet partitioning and shard splitting.

A dataset is n feature vectors with integer labels plus one prototype
vector per class.  The synthetic generator is a desk-scale stand-in for
precomputed encoder features; real features can be plugged in through the
FDEM binary format.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"FDEM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, n, d, k


@dataclass
class EmbeddingDataset:
    embeddings: np.ndarray   # (n, d)
    labels: np.ndarray       # (n,), values in [0, k)
    prototypes: np.ndarray   # (k, d)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.prototypes.ndim != 2:
            raise ShapeError("embeddings and prototypes must be 2-D")
        if self.embeddings.shape[0] < 1:
            raise ShapeError("dataset must contain at least one sample")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ShapeError("labels must match the number of embeddings")
        if self.prototypes.shape[1] != self.embeddings.shape[1]:
            raise ShapeError("prototype dim differs from embedding dim")
        if np.any(self.labels < 0) or np.any(self.labels >= self.k):
            raise ShapeError("label outside [0, k)")
        if np.any(np.linalg.norm(self.prototypes, axis=1) == 0.0):
            raise ShapeError("zero-norm prototype row")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]


@dataclass
class Partition:
    """Per-client sample indices; disjoint cover of range(n)."""

    assignments: list[np.ndarray] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)


def generate_synthetic(k: int, d: int, n: int, noise: float, seed: int) -> EmbeddingDataset:
    """k orthonormal prototypes; samples are noisy renormalized prototypes
    with labels assigned round-robin."""
    if k > n:
        raise ConfigError(f"need n >= k, got k={k}, n={n}")
    if k > d:
        raise ConfigError(f"orthonormal prototypes need d >= k, got d={d}, k={k}")
    rng = np.random.default_rng(seed)

    # Gram-Schmidt on seeded Gaussians.
    protos = np.empty((k, d))
    for i in range(k):
        while True:
            v = rng.standard_normal(d)
            for j in range(i):
                v -= np.dot(v, protos[j]) * protos[j]
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                protos[i] = v / norm
                break

    labels = np.arange(n) % k
    emb = protos[labels] + noise * rng.standard_normal((n, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return EmbeddingDataset(emb, labels, protos)


def dirichlet_partition(labels: np.ndarray, n_clients: int, beta: float,
                        seed: int) -> Partition:
    """Class-wise Dirichlet allocation: one Dirichlet(beta) draw per class
    decides how that class's samples spread over clients.  Largest-remainder
    rounding keeps the result an exact disjoint cover."""
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]

    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, beta))
        target = props * len(idx)
        counts = np.floor(target).astype(np.int64)
        remainder = len(idx) - int(counts.sum())
        if remainder > 0:
            # Stable sort: ties go to the lowest client id.
            order = np.argsort(-(target - counts), kind="stable")
            counts[order[:remainder]] += 1
        stops = np.cumsum(counts)
        start = 0
        for client, stop in enumerate(stops):
            buckets[client].append(idx[start:stop])
            start = int(stop)

    assignments = [
        np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        for parts in buckets
    ]
    return Partition(assignments)


def split_train_test(shard: np.ndarray, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then prefix/suffix split at round(ratio * len).

    The test side always gets at least one sample when the shard is
    nonempty, so evaluation stays possible on degenerate shards.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    shard = np.asarray(shard, dtype=np.int64)
    if len(shard) < 2:
        logger.warning("degenerate shard of %d sample(s); train side may be empty", len(shard))
    rng = np.random.default_rng(seed)
    order = rng.permutation(shard)
    cut = int(round(ratio * len(shard)))
    if cut == len(shard) and len(shard) > 0:
        cut -= 1
    return order[:cut], order[cut:]


def max_class_share(partition: Partition, labels: np.ndarray) -> float:
    """Heterogeneity metric: mean over (nonempty) clients of the largest
    class share inside the client's shard.  1.0 means one-class clients."""
    labels = np.asarray(labels, dtype=np.int64)
    shares = []
    for shard in partition.assignments:
        if len(shard) == 0:
            continue
        counts = np.bincount(labels[shard])
        shares.append(counts.max() / len(shard))
    if not shares:
        raise ConfigError("all clients are empty")
    return float(np.mean(shares))


def class_histogram(partition: Partition, labels: np.ndarray, k: int) -> np.ndarray:
    """(n_clients, k) matrix of per-client class counts."""
    labels = np.asarray(labels, dtype=np.int64)
    hist = np.zeros((partition.n_clients, k), dtype=np.int64)
    for client, shard in enumerate(partition.assignments):
        if len(shard):
            hist[client] = np.bincount(labels[shard], minlength=k)
    return hist


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    """Write the dataset in the FDEM little-endian binary layout."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.n, ds.d, ds.k))
        fh.write(ds.embeddings.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.prototypes.astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingDataset:
    """Read an FDEM file: magic, version u16, n/d/k u32, f32 embeddings,
    u32 labels, f32 prototypes."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes at offset 0")
    magic, version, n, d, k = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    offset = _HEADER.size

    def take(count: int, dtype: str, section: str) -> np.ndarray:
        nonlocal offset
        nbytes = count * np.dtype(dtype).itemsize
        if len(buf) < offset + nbytes:
            raise FormatError(f"truncated {section} section at byte {offset}")
        out = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        return out

    emb = take(n * d, "<f4", "embeddings").astype(np.float64).reshape(n, d)
    labels = take(n, "<u4", "labels").astype(np.int64)
    protos = take(k * d, "<f4", "prototypes").astype(np.float64).reshape(k, d)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after offset {offset}")
    if np.any(labels >= k):
        bad = int(np.argmax(labels >= k))
        raise FormatError(
            f"label {int(labels[bad])} >= k={k} at record {bad} "
            f"(byte {_HEADER.size + 4 * n * d + 4 * bad})")
    try:
        return EmbeddingDataset(emb, labels, protos)
    except ShapeError as exc:
        raise FormatError(str(exc)) from exc

"""Low-rank adapter with an optional sparsifiable gate.

The adapter contributes ``up @ diag(gate) @ down @ x`` on top of a frozen
linear map.  The gate is pruned with a proximal (soft-threshold) step; a
hard threshold is available as a config escape hatch.  Adapters serialize
to a little-endian binary format that doubles as the wire format counted
by communication accounting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ShapeError

MAGIC = b"FDLP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")  # magic, version, rank, d_in, d_out, gate flag


@dataclass
class LoraAdapter:
    rank: int
    d_in: int
    d_out: int
    down: np.ndarray          # (rank, d_in)
    up: np.ndarray            # (d_out, rank)
    gate: np.ndarray | None = None  # (rank,)

    def __post_init__(self):
        if self.down.shape != (self.rank, self.d_in):
            raise ShapeError(f"down shape {self.down.shape} != ({self.rank}, {self.d_in})")
        if self.up.shape != (self.d_out, self.rank):
            raise ShapeError(f"up shape {self.up.shape} != ({self.d_out}, {self.rank})")
        if self.gate is not None and self.gate.shape != (self.rank,):
            raise ShapeError(f"gate shape {self.gate.shape} != ({self.rank},)")

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            self.rank, self.d_in, self.d_out,
            self.down.copy(), self.up.copy(),
            None if self.gate is None else self.gate.copy(),
        )

    def same_structure(self, other: "LoraAdapter") -> bool:
        return (
            self.rank == other.rank
            and self.d_in == other.d_in
            and self.d_out == other.d_out
            and (self.gate is None) == (other.gate is None)
        )


@dataclass
class AdapterGrads:
    d_down: np.ndarray
    d_up: np.ndarray
    d_gate: np.ndarray | None = None


def init_adapter(rank: int, d_in: int, d_out: int, with_gate: bool, seed: int) -> LoraAdapter:
    """Fresh adapter: uniform down-projection, zero up-projection, unit gate.

    ``up = 0`` makes the initial delta exactly zero, so a fresh adapter
    reproduces the frozen base model.
    """
    if rank < 1 or d_in < 1 or d_out < 1:
        raise ConfigError(f"rank/dims must be >= 1, got ({rank}, {d_in}, {d_out})")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d_in)
    down = rng.uniform(-bound, bound, size=(rank, d_in))
    up = np.zeros((d_out, rank))
    gate = np.ones(rank) if with_gate else None
    return LoraAdapter(rank, d_in, d_out, down, up, gate)


def apply_delta(ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """up @ diag(gate) @ down @ x (gate treated as all-ones when absent)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (ad.d_in,):
        raise ShapeError(f"input shape {x.shape} != ({ad.d_in},)")
    z = ad.down @ x
    if ad.gate is not None:
        z = ad.gate * z
    return ad.up @ z


def apply_delta_batch(ad: LoraAdapter, xs: np.ndarray) -> np.ndarray:
    """Row-wise apply_delta for a (n, d_in) batch."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != ad.d_in:
        raise ShapeError(f"batch shape {xs.shape} incompatible with d_in={ad.d_in}")
    z = xs @ ad.down.T
    if ad.gate is not None:
        z = z * ad.gate
    return z @ ad.up.T


def soft_threshold(g: np.ndarray, threshold: float) -> np.ndarray:
    """Elementwise sign(g) * max(|g| - threshold, 0)."""
    if threshold < 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold}")
    g = np.asarray(g, dtype=np.float64)
    return np.sign(g) * np.maximum(np.abs(g) - threshold, 0.0)


def hard_threshold(g: np.ndarray, threshold: float) -> np.ndarray:
    """Zero entries with |g| <= threshold, keep the rest unchanged."""
    if threshold < 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold}")
    g = np.asarray(g, dtype=np.float64)
    return np.where(np.abs(g) <= threshold, 0.0, g)


def proximal_gate_step(ad: LoraAdapter, d_gate: np.ndarray, mu: float, xi: float,
                       mode: str = "soft") -> None:
    """Gate update: gate <- T(gate - mu * d_gate) with threshold mu * xi.

    In-place; zeroed positions are the pruned rank directions.
    """
    if ad.gate is None:
        raise ContractError("proximal_gate_step on a gateless adapter")
    d_gate = np.asarray(d_gate, dtype=np.float64)
    if d_gate.shape != ad.gate.shape:
        raise ShapeError(f"d_gate shape {d_gate.shape} != {ad.gate.shape}")
    if xi < 0:
        raise ConfigError(f"xi must be >= 0, got {xi}")
    stepped = ad.gate - mu * d_gate
    if mode == "soft":
        ad.gate = soft_threshold(stepped, mu * xi)
    elif mode == "hard":
        ad.gate = hard_threshold(stepped, mu * xi)
    else:
        raise ConfigError(f"unknown threshold mode {mode!r}")


def param_count(ad: LoraAdapter, effective: bool = False) -> int:
    """Adapter parameter count.

    Raw: rank * (d_in + d_out) plus the gate length.  Effective: rank is
    replaced by the number of nonzero gates (rows/cols tied to pruned
    directions no longer count).
    """
    r = ad.rank
    gate_params = r if ad.gate is not None else 0
    if effective and ad.gate is not None:
        r = int(np.count_nonzero(ad.gate))
        gate_params = r
    return r * (ad.d_in + ad.d_out) + gate_params


def merge_adapters(a: LoraAdapter, b: LoraAdapter) -> LoraAdapter:
    """Rank-(ra+rb) adapter whose delta is the sum of both deltas."""
    if a.d_in != b.d_in or a.d_out != b.d_out:
        raise ShapeError("adapters must share d_in/d_out to merge")
    down = np.vstack([a.down, b.down])
    up = np.hstack([a.up, b.up])
    if a.gate is None and b.gate is None:
        gate = None
    else:
        gate = np.concatenate([
            a.gate if a.gate is not None else np.ones(a.rank),
            b.gate if b.gate is not None else np.ones(b.rank),
        ])
    return LoraAdapter(a.rank + b.rank, a.d_in, a.d_out, down, up, gate)


def serialize(ad: LoraAdapter) -> bytes:
    """Little-endian layout: magic, version u16, rank/d_in/d_out u32,
    gate-present u8, then down, up, (gate) as f32 row-major."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, ad.rank, ad.d_in, ad.d_out,
                          1 if ad.gate is not None else 0)]
    parts.append(ad.down.astype("<f4").tobytes())
    parts.append(ad.up.astype("<f4").tobytes())
    if ad.gate is not None:
        parts.append(ad.gate.astype("<f4").tobytes())
    return b"".join(parts)


def serialized_size(ad: LoraAdapter) -> int:
    return _HEADER.size + 4 * param_count(ad)


def deserialize(buf: bytes) -> LoraAdapter:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes < {_HEADER.size}")
    magic, version, rank, d_in, d_out, gate_flag = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if gate_flag not in (0, 1):
        raise FormatError(f"bad gate flag {gate_flag}")
    offset = _HEADER.size

    def take(count: int, section: str) -> np.ndarray:
        nonlocal offset
        nbytes = 4 * count
        if len(buf) < offset + nbytes:
            raise FormatError(f"truncated {section} section at byte {offset}")
        out = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)
        offset += nbytes
        return out

    down = take(rank * d_in, "down").reshape(rank, d_in)
    up = take(d_out * rank, "up").reshape(d_out, rank)
    gate = take(rank, "gate") if gate_flag else None
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after offset {offset}")
    if not np.all(np.isfinite(down)) or not np.all(np.isfinite(up)):
        raise FormatError("non-finite adapter weights")
    return LoraAdapter(rank, d_in, d_out, down, up, gate)

"""Frozen-base classifier head and analytic gradients for adapter training.

The head scores an adapted embedding ``e = w0 @ x + delta(x)`` against
fixed class prototypes by temperature-scaled cosine similarity.  Losses
are cross-entropy plus an optional KL distillation term against a frozen
teacher adapter; gradients w.r.t. the student adapter's down/up/gate are
derived by hand through the cosine (no autodiff).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterGrads, LoraAdapter
from .errors import ConfigError, DegenerateInputError, ShapeError
from .linalg import log_softmax

KD_DIRECTIONS = ("student_first", "teacher_first")


@dataclass
class FrozenHead:
    """Immutable projection + class prototypes + temperature."""

    w0: np.ndarray           # (d_out, d_in), frozen
    prototypes: np.ndarray   # (k, d_out), one row per class
    temperature: float

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.w0.ndim != 2 or self.prototypes.ndim != 2:
            raise ShapeError("w0 and prototypes must be 2-D")
        if self.prototypes.shape[1] != self.w0.shape[0]:
            raise ShapeError(
                f"prototype dim {self.prototypes.shape[1]} != w0 rows {self.w0.shape[0]}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero-norm prototype row")
        self._proto_norms = norms

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]


@dataclass
class ForwardTrace:
    x: np.ndarray
    embedding: np.ndarray   # w0 @ x + delta(x)
    cosines: np.ndarray     # per-class cosine similarity
    logits: np.ndarray      # cosines / temperature


def _batch_embed(head: FrozenHead, ad: LoraAdapter, xs: np.ndarray):
    """Embeddings, their norms, cosines and logits for a (m, d_in) batch."""
    z = xs @ ad.down.T
    h = z * ad.gate if ad.gate is not None else z
    emb = xs @ head.w0.T + h @ ad.up.T
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm adapted embedding")
    cos = (emb @ head.prototypes.T) / (norms[:, None] * head._proto_norms[None, :])
    logits = cos / head.temperature
    return z, h, emb, norms, cos, logits


def forward(head: FrozenHead, ad: LoraAdapter, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (head.d_in,):
        raise ShapeError(f"input shape {x.shape} != ({head.d_in},)")
    _, _, emb, _, cos, logits = _batch_embed(head, ad, x[None, :])
    return ForwardTrace(x, emb[0], cos[0], logits[0])


def predict(head: FrozenHead, ad: LoraAdapter, x: np.ndarray) -> int:
    """Class with the highest logit; ties resolve to the lowest index."""
    return int(np.argmax(forward(head, ad, x).logits))


def predict_batch(head: FrozenHead, ad: LoraAdapter, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    _, _, _, _, _, logits = _batch_embed(head, ad, xs)
    return np.argmax(logits, axis=1)


def loss_and_grads(head: FrozenHead, student: LoraAdapter, xs: np.ndarray,
                   ys: np.ndarray, teacher: LoraAdapter | None = None,
                   kd_weight: float = 0.0,
                   kd_direction: str = "student_first") -> tuple[float, AdapterGrads]:
    """Mean batch loss CE + kd_weight * KL and its student-adapter gradients.

    The teacher adapter is frozen: gradients flow only into the student.
    ``student_first`` puts the student's distribution first in the KL, the
    literal reading of the bidirectional distillation losses;
    ``teacher_first`` swaps the arguments.
    """
    if kd_weight < 0:
        raise ConfigError(f"kd_weight must be >= 0, got {kd_weight}")
    if kd_direction not in KD_DIRECTIONS:
        raise ConfigError(f"kd_direction must be one of {KD_DIRECTIONS}")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.ndim != 2 or xs.shape[1] != head.d_in:
        raise ShapeError(f"batch shape {xs.shape} incompatible with d_in={head.d_in}")
    if ys.shape != (xs.shape[0],):
        raise ShapeError("labels must match batch length")
    if np.any(ys < 0) or np.any(ys >= head.n_classes):
        raise IndexError("label out of range")

    m = xs.shape[0]
    z, h, emb, norms, cos, logits = _batch_embed(head, student, xs)
    ls = log_softmax(logits)
    sm = np.exp(ls)
    rows = np.arange(m)

    loss = float(-ls[rows, ys].mean())
    d_logits = sm.copy()
    d_logits[rows, ys] -= 1.0

    use_kd = teacher is not None and kd_weight > 0.0
    if use_kd:
        _, _, _, _, _, t_logits = _batch_embed(head, teacher, xs)
        lt = log_softmax(t_logits)
        if kd_direction == "student_first":
            kl_rows = np.sum(sm * (ls - lt), axis=1)
            d_logits += kd_weight * sm * ((ls - lt) - kl_rows[:, None])
        else:
            q = np.exp(lt)
            kl_rows = np.sum(q * (lt - ls), axis=1)
            d_logits += kd_weight * (sm - q)
        loss += kd_weight * float(kl_rows.mean())

    # Chain rule through s = cos(e, p)/tau with
    # d cos(e, p)/de = p/(|e||p|) - cos * e/|e|^2, averaged over the batch.
    d_cos = d_logits / (m * head.temperature)
    d_emb = ((d_cos / head._proto_norms[None, :]) @ head.prototypes) / norms[:, None]
    d_emb -= (np.sum(d_cos * cos, axis=1) / norms**2)[:, None] * emb

    d_up = d_emb.T @ h
    d_h = d_emb @ student.up
    d_gate = np.sum(z * d_h, axis=0) if student.gate is not None else None
    d_z = d_h * student.gate if student.gate is not None else d_h
    d_down = d_z.T @ xs
    return loss, AdapterGrads(d_down, d_up, d_gate)


def local_loss(head: FrozenHead, local: LoraAdapter, global_ad: LoraAdapter,
               x: np.ndarray, y: int, alpha: float,
               kd_direction: str = "student_first") -> tuple[float, AdapterGrads]:
    """CE + alpha * KL(local || global) for one sample; grads for the local
    adapter only (the global adapter is frozen)."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    return loss_and_grads(head, local, x[None, :], np.array([y]),
                          teacher=global_ad, kd_weight=alpha,
                          kd_direction=kd_direction)


def global_loss(head: FrozenHead, global_ad: LoraAdapter, local: LoraAdapter,
                x: np.ndarray, y: int,
                kd_direction: str = "student_first") -> tuple[float, AdapterGrads]:
    """CE + KL(global || local) for one sample; grads for the global adapter
    only (the local adapter is frozen, no extra control weight)."""
    x = np.asarray(x, dtype=np.float64)
    return loss_and_grads(head, global_ad, x[None, :], np.array([y]),
                          teacher=local, kd_weight=1.0,
                          kd_direction=kd_direction)

"""Dense float64 kernel: matrix product, cosine similarity and the
numerically stable softmax family used by every other module.

Matrices are 2-D row-major ``numpy.ndarray``s, vectors are 1-D; everything
is carried in float64 (32-bit floats appear only at the serialization
boundary).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    return a


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={v.ndim}")
    return v


def _require_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError(f"{name} contains non-finite entries")


def matmul(a, b) -> np.ndarray:
    """Standard matrix product (a.rows x b.cols)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    return a @ b


def cosine_similarity(u, v) -> float:
    """u.v / (|u| |v|), clipped into [-1, 1]."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise ShapeError(f"cosine: length mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction; accepts 1-D or 2-D input."""
    x = np.asarray(logits, dtype=np.float64)
    _require_finite(x, "logits")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    v = as_vector(logits, "logits")
    return np.exp(log_softmax(v))


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label]."""
    v = as_vector(logits, "logits")
    label = int(label)
    if label < 0 or label >= v.shape[0]:
        raise IndexError(f"label {label} out of range for {v.shape[0]} logits")
    return float(-log_softmax(v)[label])


def kl_divergence(p_logits, q_logits) -> float:
    """KL(softmax(p_logits) || softmax(q_logits)), >= 0."""
    p = as_vector(p_logits, "p_logits")
    q = as_vector(q_logits, "q_logits")
    if p.shape != q.shape:
        raise ShapeError(f"kl: length mismatch {p.shape} vs {q.shape}")
    lp = log_softmax(p)
    lq = log_softmax(q)
    return float(np.sum(np.exp(lp) * (lp - lq)))

"""Small deterministic dense-array kernels used by every other module.

All values are float64 internally regardless of how traces are stored;
selection logic is rank-based, so the extra precision only tightens
golden-value checks. Every function here is pure and safe to call from
concurrent workers.
"""

import math

import numpy as np

from .errors import BudgetError, DegenerateInputError, ShapeError

__all__ = [
    "as_tensor",
    "round_half_up",
    "softmax_rows",
    "scaled_attention",
    "top_k_indices",
    "cosine_similarity",
]


def as_tensor(values, ndim: int | None = None) -> np.ndarray:
    """Validate and convert to a C-order float64 array.

    Enforces the tensor invariants: every dimension >= 1 and every entry
    finite. ``ndim``, when given, additionally pins the expected rank.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 0:
        raise ShapeError("expected an array with at least one dimension, got a scalar")
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-D array, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"dimensions must all be >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DegenerateInputError("array contains NaN or Inf")
    return arr


def round_half_up(x: float) -> int:
    """Round to the nearest integer with halves going up.

    A 1e-9 epsilon guards against float dust in retention * count
    products (0.35 * 10 is slightly below 3.5 in binary floats).
    """
    return int(math.floor(x + 0.5 + 1e-9))


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax of a 2-D array with per-row max subtraction."""
    arr = as_tensor(logits, ndim=2)
    shifted = arr - arr.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def scaled_attention(query, keys) -> np.ndarray:
    """Softmax(query @ keys.T / sqrt(D)) for query [q, D] and keys [n, D]."""
    q = as_tensor(query, ndim=2)
    k = as_tensor(keys, ndim=2)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(
            f"query dim {q.shape[1]} does not match key dim {k.shape[1]}"
        )
    logits = q @ k.T / math.sqrt(k.shape[1])
    return softmax_rows(logits)


def top_k_indices(scores, k: int) -> list[int]:
    """Indices of the k largest scores, ascending, ties to the lower index."""
    arr = as_tensor(scores, ndim=1)
    n = arr.shape[0]
    if not 0 <= k <= n:
        raise BudgetError(f"k={k} outside [0, {n}]")
    if k == 0:
        return []
    # stable argsort on negated scores keeps the lower index first on ties
    order = np.argsort(-arr, kind="stable")[:k]
    return sorted(int(i) for i in order)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    va = as_tensor(a, ndim=1)
    vb = as_tensor(b, ndim=1)
    if va.shape != vb.shape:
        raise ShapeError(f"vector lengths differ: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))

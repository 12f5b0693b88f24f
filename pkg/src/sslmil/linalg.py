"""Dense f64 array primitives shared by every loss and model.

Matrices are 2-d numpy arrays in row-major order, vectors are 1-d arrays.
All accumulation happens in float64; only file I/O quantizes to float32.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidParameterError, ShapeMismatchError

EPS_NORM = 1e-12


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-d float64 array, copying only when needed."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-d, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidParameterError(f"{name} contains non-finite entries")
    return m


def as_vector(data, name: str = "vector") -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatchError(f"{name} must be 1-d, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidParameterError(f"{name} contains non-finite entries")
    return v


def softmax_rows(m, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over each row, stabilized by max-shift.

    Rows of the result are nonnegative and sum to 1 within 1e-12 for any
    finite input and tau > 0.
    """
    if tau <= 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    m = as_matrix(m)
    scaled = m / tau
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize_rows(m) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    Rows with norm <= EPS_NORM are rejected rather than perturbed, so
    degenerate embeddings surface as errors instead of silent garbage.
    """
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(norms <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateInputError(f"row {bad[0]} has near-zero norm ({norms[bad[0]]:g})")
    return m / norms[:, None]


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise ShapeMismatchError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise DegenerateInputError("zero-norm input to cosine_similarity")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def log_sum_exp(v) -> float:
    """log(sum(exp(v))) via max-shift; exact for a single element."""
    v = as_vector(v)
    if v.size == 0:
        raise InvalidParameterError("log_sum_exp of empty vector")
    hi = v.max()
    return float(hi + np.log(np.exp(v - hi).sum()))

#!/usr/bin/env python3
"""
Dense float64 kernels. DenseMatrix is a C-contiguous (row-major) numpy array of float64,
so checkpoints written from `.ravel()` are portable.
"""
import numpy as np

DenseMatrix = np.ndarray


def as_matrix(data, rows=None, cols=None) -> DenseMatrix:
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ValueError(f"data length {m.size} != rows*cols = {rows}*{cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"matrix dims must be positive, got {m.shape}")
    return m


def as_vector(data) -> np.ndarray:
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected vector, got shape {v.shape}")
    return v


def check_finite(arr, what="array"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {what}")
    return arr


def matmul(a, b):
    """a @ b with a shape check; vectors act as a single row (left) or column (right)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def l2_normalize(v, target_norm=1.0, eps=0.0):
    """
    Rescale v to Euclidean norm `target_norm`. With eps=0 a zero vector is an error;
    with eps>0 the denominator is ‖v‖+eps (used inside the differentiable head).
    """
    if target_norm <= 0:
        raise ValueError(f"target_norm must be positive, got {target_norm}")
    v = as_vector(v)
    n = float(np.linalg.norm(v))
    if eps == 0.0 and n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v * (target_norm / (n + eps))


def normalize_columns(m, eps=0.0):
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=0)
    if eps == 0.0 and np.any(norms == 0.0):
        raise ValueError("cannot normalize zero vector")
    return m / (norms + eps), norms


def saxpy(alpha, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"saxpy length mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y

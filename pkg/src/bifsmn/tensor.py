"""Dense float32 matrix helpers shared by every other module.

A "matrix" here is a 2-D, C-contiguous ``np.float32`` array. Hidden states
are time-major: rows are frames, columns are features.
"""
import numpy as np

from .errors import ShapeError


def as_matrix(x, name="matrix", dtype=np.float32):
    """Validate ``x`` as a finite 2-D array and return it as a contiguous copy-free view when possible."""
    m = np.ascontiguousarray(x, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def matmul_ref(a, b):
    """Full-precision product ``a @ b`` with float64 accumulation, returned as float32."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def l2_norm(m):
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ShapeError("l2_norm of an empty matrix")
    return float(np.sqrt(np.sum(m * m)))


def stddev(m):
    """Population standard deviation over all entries (0 for a constant matrix)."""
    m = np.asarray(m, dtype=np.float64)
    if m.size < 2:
        raise ShapeError("stddev needs at least two entries")
    return float(np.std(m))

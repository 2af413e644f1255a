"""Dense float64 helpers used throughout the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
helpers here add the checks the rest of the code relies on: finite values,
conformable shapes, non-degenerate rows.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateRowError, NoNegativesError, NumericError, ShapeError

EPS_NORM = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_l2_normalize(a: np.ndarray, eps: float = EPS_NORM,
                     modality: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scale every row to unit length.

    Returns the normalized matrix and the original row norms, which the
    backward pass through the normalization needs.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    # fast path: two reductions; NaN fails the first comparison
    if not (norms.min() > eps and norms.max() < np.inf):
        if not np.all(np.isfinite(norms)):
            raise NumericError(f"{modality or 'matrix'} rows have non-finite norms")
        raise DegenerateRowError(int(np.flatnonzero(norms <= eps)[0]), modality)
    return a / norms[:, None], norms


def normalize_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit rows back to the unnormalized rows."""
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def argmax_excluding(v, excluded: int) -> int:
    """Index of the largest entry other than ``excluded``; ties go to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        raise NoNegativesError("need at least two entries to exclude one")
    if not 0 <= excluded < n:
        raise IndexError(f"excluded index {excluded} out of range for length {n}")
    masked = v.copy()
    masked[excluded] = -np.inf
    # np.argmax returns the first maximal position
    return int(np.argmax(masked))


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function is not finite near element {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); equal seeds give equal streams everywhere."""
    return np.random.Generator(np.random.Philox(seed))


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent substream keyed by ``seed`` and a stream label."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))

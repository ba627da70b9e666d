"""Dense numeric substrate: matrix products, masked row softmax, and the
central-finite-difference gradient checker every backward test relies on.

All functions are pure and dtype-preserving (float64 in, float64 out).
Gradient checks always run in double precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateRowError, DimensionError, NumericError, ProbeError

Array = np.ndarray


def matmul(a: Array, b: Array) -> Array:
    """Matrix product ``a @ b`` with an explicit inner-dimension check.

    Accepts stacked matrices (leading batch dimensions broadcast as in
    ``numpy.matmul``). Raises :class:`DimensionError` naming both shapes
    when the inner dimensions disagree.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: Array, mask: Array | None = None) -> Array:
    """Row-wise softmax over the last axis, stabilized by row-max subtraction.

    ``mask`` (optional, boolean, same shape): True entries participate,
    False entries come out exactly 0. A row with no True entry raises
    :class:`DegenerateRowError`.
    """
    m = np.asarray(m)
    if m.ndim < 1 or m.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs at least one column, got shape {m.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match input shape {m.shape}")
        if not mask.any(axis=-1).all():
            bad = np.argwhere(~mask.any(axis=-1))[0]
            raise DegenerateRowError(f"row {tuple(bad)} is fully masked")
        neg_inf = np.array(-np.inf, dtype=m.dtype)
        m = np.where(mask, m, neg_inf)
    row_max = np.max(m, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        p = np.exp(m - row_max)
    if mask is not None:
        p = np.where(mask, p, np.array(0.0, dtype=p.dtype))
    denom = np.sum(p, axis=-1, keepdims=True)
    return p / denom


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central finite differences ``(f(x+h e_i) - f(x-h e_i)) / 2h``.

    Runs in double precision regardless of the input dtype; ``f`` must
    return a finite scalar at every probe point or :class:`ProbeError`
    is raised naming the offending coordinate.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += h
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ProbeError(f"non-finite probe at coordinate {idx}: f(+h)={fp}, f(-h)={fm}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def require_finite(*arrays: Array, what: str = "input") -> None:
    """Raise :class:`NumericError` if any array contains NaN/Inf."""
    for a in arrays:
        if a is not None and not np.isfinite(a).all():
            raise NumericError(f"non-finite values in {what}")

"""Training losses: distillation KL, next-token prediction, and the hinge
capacity penalty on prefix sums of decayed retention, plus the combined
objective. Each loss has an analytic gradient companion used by the
trainer; the capacity loss streams over tiles and never materializes the
T x T decay matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

Array = np.ndarray


def _log_softmax(x: Array) -> Array:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _n_rows(x: Array) -> int:
    return int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1


def kl_distill(p_logits: Array, q_logits: Array, direction: str = "forward") -> float:
    """Mean per-position KL between teacher ``p`` and student ``q`` logits.

    ``forward`` is D_KL(p || q); ``reverse`` is D_KL(q || p). The teacher
    distribution is treated as a constant either way.
    """
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}")
    if p_logits.shape[-1] < 2:
        raise DimensionError("need a vocabulary of at least 2")
    lp = _log_softmax(p_logits)
    lq = _log_softmax(q_logits)
    if direction == "forward":
        per_row = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    elif direction == "reverse":
        per_row = np.sum(np.exp(lq) * (lq - lp), axis=-1)
    else:
        raise ConfigError(f"unknown KL direction {direction!r}")
    return float(np.mean(per_row))


def kl_distill_grad(p_logits: Array, q_logits: Array, direction: str = "forward") -> Array:
    """Gradient of :func:`kl_distill` w.r.t. the student logits."""
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    n = _n_rows(q_logits)
    lq = _log_softmax(q_logits)
    q = np.exp(lq)
    if direction == "forward":
        p = np.exp(_log_softmax(p_logits))
        return (q - p) / n
    if direction == "reverse":
        r = lq - _log_softmax(p_logits)
        inner = r - np.sum(q * r, axis=-1, keepdims=True)
        return q * inner / n
    raise ConfigError(f"unknown KL direction {direction!r}")


def ntp_loss(q_logits: Array, targets: Array) -> float:
    """Mean negative log-likelihood of ``targets`` under softmax(q_logits)."""
    q_logits = np.asarray(q_logits, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.shape != q_logits.shape[:-1]:
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits {q_logits.shape}"
        )
    V = q_logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target outside [0, {V})")
    lq = _log_softmax(q_logits)
    picked = np.take_along_axis(lq, targets[..., None], axis=-1)
    return float(-np.mean(picked))


def ntp_loss_grad(q_logits: Array, targets: Array) -> Array:
    """Gradient of :func:`ntp_loss` w.r.t. the logits."""
    q_logits = np.asarray(q_logits, dtype=np.float64)
    targets = np.asarray(targets)
    n = _n_rows(q_logits)
    q = np.exp(_log_softmax(q_logits))
    grad = q.copy()
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    return grad / n


def prefix_decay_sums(log_betas: Array, tile: int = 32) -> Array:
    """``S_t = sum_{i<=t} exp((t-i) * log_beta_i)`` for each trailing-axis
    sequence, streamed in (tile x tile) blocks. Underflowed decay factors
    contribute exactly 0.
    """
    lb = np.asarray(log_betas)
    T = lb.shape[-1]
    out = np.zeros(lb.shape, dtype=np.float64)
    positions = np.arange(T)
    for r0 in range(0, T, tile):
        r1 = min(r0 + tile, T)
        rows = positions[r0:r1]
        acc = np.zeros(lb.shape[:-1] + (r1 - r0,), dtype=np.float64)
        for c0 in range(0, r1, tile):
            c1 = min(c0 + tile, r1)
            gaps = rows[:, None] - positions[None, c0:c1]
            valid = gaps >= 0
            with np.errstate(under="ignore"):
                f = np.exp(np.maximum(gaps, 0) * lb[..., None, c0:c1].astype(np.float64))
            acc += np.sum(np.where(valid, f, 0.0), axis=-1)
        out[..., r0:r1] = acc
    return out


def capacity_loss(log_betas: Array, M: int, tile: int = 32):
    """Hinge penalty on prefix sums of decayed retention exceeding ``M``:
    ``(1 / (T (T-M))) * sum_t max(0, S_t - M)``.

    ``log_betas`` is one sequence of log-scores per head (trailing axis T);
    leading axes are treated as independent heads and a matching array of
    per-head losses is returned (a plain float for 1-D input). When
    ``T <= M`` the hinge can never activate and the loss is defined as 0.
    """
    lb = np.asarray(log_betas)
    if M < 1:
        raise ConfigError(f"memory budget must be >= 1, got {M}")
    T = lb.shape[-1]
    if T <= M:
        zero = np.zeros(lb.shape[:-1], dtype=np.float64)
        return float(zero) if lb.ndim == 1 else zero
    S = prefix_decay_sums(lb, tile=tile)
    hinge = np.maximum(0.0, S - M)
    val = hinge.sum(axis=-1) / (T * (T - M))
    return float(val) if lb.ndim == 1 else val


def capacity_loss_grad(log_betas: Array, M: int, tile: int = 32) -> Array:
    """Gradient of :func:`capacity_loss` w.r.t. ``log_betas`` (same shape).

    Streams the same tile blocks as the forward pass; positions whose
    prefix sum sits exactly on the budget use the 0 subgradient.
    """
    lb = np.asarray(log_betas)
    T = lb.shape[-1]
    grad = np.zeros(lb.shape, dtype=np.float64)
    if T <= M:
        return grad
    active = prefix_decay_sums(lb, tile=tile) > M
    positions = np.arange(T)
    for r0 in range(0, T, tile):
        r1 = min(r0 + tile, T)
        rows = positions[r0:r1]
        act = active[..., r0:r1]
        for c0 in range(0, r1, tile):
            c1 = min(c0 + tile, r1)
            gaps = rows[:, None] - positions[None, c0:c1]
            valid = gaps >= 0
            with np.errstate(under="ignore"):
                f = np.exp(np.maximum(gaps, 0) * lb[..., None, c0:c1].astype(np.float64))
            term = np.where(valid & act[..., None], gaps * f, 0.0)
            grad[..., c0:c1] += term.sum(axis=-2)
    return grad / (T * (T - M))


@dataclass
class LossReport:
    """Scalar loss components and their weighted total for one step."""

    l_kl: float
    l_ntp: float
    l_cap: float
    lambda_cap: float
    total: float

    def to_log_dict(self, step: int) -> dict:
        return {
            "step": step,
            "kl": self.l_kl,
            "ntp": self.l_ntp,
            "cap": self.l_cap,
            "total": self.total,
        }


def total_objective(l_kl: float, l_ntp: float, l_cap: float, lambda_cap: float = 1.0) -> LossReport:
    """Combine quality (KL + NTP) and capacity terms into one report."""
    if lambda_cap < 0:
        raise ConfigError(f"lambda_cap must be >= 0, got {lambda_cap}")
    parts = (l_kl, l_ntp, l_cap)
    if not all(np.isfinite(parts)):
        raise ConfigError(f"non-finite loss components: {parts}")
    total = float(l_kl) + float(l_ntp) + float(lambda_cap) * float(l_cap)
    return LossReport(
        l_kl=float(l_kl),
        l_ntp=float(l_ntp),
        l_cap=float(l_cap),
        lambda_cap=float(lambda_cap),
        total=total,
    )

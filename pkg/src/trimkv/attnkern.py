"""Causal and retention-gated attention kernels.

Every function takes per-head ``(T, d)`` query/key/value arrays; leading
batch/head dimensions are accepted and broadcast. The gated variant
multiplies each pre-softmax logit by the decayed retention factor
``beta_i**(t-i)``; the factor is always evaluated in log space as
``exp((t-i) * log(beta_i))`` so long gaps underflow cleanly to 0 instead
of producing denormal garbage.

The tiled kernels stream over fixed-size blocks with an online
log-sum-exp and never materialize the ``T x T`` score or decay matrices.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError
from .numkern import require_finite

Array = np.ndarray


def _default_scale(d_head: int, scale: float | None) -> float:
    return float(d_head) ** -0.5 if scale is None else float(scale)


def _log_betas_from(betas: Array | None, log_betas: Array | None) -> Array | None:
    if log_betas is not None:
        return np.asarray(log_betas)
    if betas is None:
        return None
    betas = np.asarray(betas)
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise DomainError("betas must lie strictly inside (0, 1)")
    return np.log(betas)


def _gap_grid(T: int):
    rows = np.arange(T)
    gaps = rows[:, None] - rows[None, :]
    return gaps, gaps >= 0


def _logits(q: Array, k: Array, log_betas: Array | None, scale: float) -> tuple[Array, Array | None]:
    """Masked pre-softmax logits plus the decay factors (None for vanilla)."""
    T = q.shape[-2]
    gaps, valid = _gap_grid(T)
    s = (q @ np.swapaxes(k, -1, -2)) * np.asarray(scale, dtype=q.dtype)
    neg_inf = np.array(-np.inf, dtype=s.dtype)
    if log_betas is None:
        return np.where(valid, s, neg_inf), None
    with np.errstate(under="ignore"):
        # clamp acausal gaps to 0 before exp; those entries are masked below
        factors = np.exp(np.maximum(gaps, 0) * log_betas[..., None, :])
    logits = np.where(valid, factors * s, neg_inf)
    return logits, factors


def _softmax_causal(logits: Array) -> Array:
    row_max = np.max(logits, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        p = np.exp(logits - row_max)
    p = np.where(np.isneginf(logits), np.array(0.0, dtype=p.dtype), p)
    return p / np.sum(p, axis=-1, keepdims=True)


def _attend(logits: Array, v: Array) -> Array:
    # Normalize after the value matmul so a single-tile streaming pass is
    # bit-identical to this dense path.
    row_max = np.max(logits, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        p = np.exp(logits - row_max)
    p = np.where(np.isneginf(logits), np.array(0.0, dtype=p.dtype), p)
    denom = np.sum(p, axis=-1, keepdims=True)
    return (p @ v) / denom


def causal_attention_fwd(q: Array, k: Array, v: Array, scale: float | None = None) -> Array:
    """Standard causal attention: ``o_t = sum_{i<=t} softmax_i(scale * q_t.k_i) v_i``."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    require_finite(q, k, v, what="attention input")
    logits, _ = _logits(q, k, None, _default_scale(q.shape[-1], scale))
    return _attend(logits, v)


def gated_attention_fwd(
    q: Array,
    k: Array,
    v: Array,
    betas: Array | None = None,
    scale: float | None = None,
    log_betas: Array | None = None,
) -> Array:
    """Retention-gated attention: each logit is multiplied by ``beta_i**(t-i)``.

    ``betas`` has shape ``(..., T)`` with entries strictly in (0, 1);
    callers that already hold log-domain scores may pass ``log_betas``
    instead and skip the round trip through ``exp``/``log``.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    require_finite(q, k, v, what="attention input")
    lb = _log_betas_from(betas, log_betas)
    if lb is None:
        raise DomainError("gated attention requires betas (or log_betas)")
    logits, _ = _logits(q, k, lb, _default_scale(q.shape[-1], scale))
    return _attend(logits, v)


def gated_attention_bwd(
    q: Array,
    k: Array,
    v: Array,
    betas: Array | None,
    grad_out: Array,
    scale: float | None = None,
    log_betas: Array | None = None,
    beta_grad_in_log_domain: bool = False,
):
    """Analytic gradients of the gated forward map.

    Returns ``(grad_q, grad_k, grad_v, grad_beta)``. ``grad_beta`` is with
    respect to beta itself unless ``beta_grad_in_log_domain`` is set, in
    which case it is with respect to ``log(beta)`` (the training path uses
    the log-domain form to stay finite for very small betas). With
    ``betas`` and ``log_betas`` both None the kernel differentiates plain
    causal attention and returns ``grad_beta = None``.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    grad_out = np.asarray(grad_out)
    require_finite(q, k, v, grad_out, what="attention backward input")
    sc = _default_scale(q.shape[-1], scale)
    lb = _log_betas_from(betas, log_betas)
    logits, factors = _logits(q, k, lb, sc)
    p = _softmax_causal(logits)
    out = p @ v

    g_p = grad_out @ np.swapaxes(v, -1, -2)
    delta = np.sum(grad_out * out, axis=-1, keepdims=True)
    g_logits = p * (g_p - delta)

    if factors is None:
        g_s = g_logits
        grad_beta = None
    else:
        g_s = g_logits * factors
        gaps, valid = _gap_grid(q.shape[-2])
        s = (q @ np.swapaxes(k, -1, -2)) * np.asarray(sc, dtype=q.dtype)
        g_factors = np.where(valid, g_logits * s, 0.0)
        # d factor / d log(beta_i) = gap * factor
        g_log_beta = np.sum(g_factors * gaps * factors, axis=-2)
        if beta_grad_in_log_domain:
            grad_beta = g_log_beta
        else:
            grad_beta = g_log_beta * np.exp(-lb)

    scaled = g_s * np.asarray(sc, dtype=q.dtype)
    grad_q = scaled @ k
    grad_k = np.swapaxes(scaled, -1, -2) @ q
    grad_v = np.swapaxes(p, -1, -2) @ grad_out
    return grad_q, grad_k, grad_v, grad_beta


def _block_logits(q_blk, k_blk, lb_blk, rows, cols, scale):
    """Logits for one (query rows x key cols) block; mirrors :func:`_logits`."""
    gaps = rows[:, None] - cols[None, :]
    valid = gaps >= 0
    s = (q_blk @ np.swapaxes(k_blk, -1, -2)) * np.asarray(scale, dtype=q_blk.dtype)
    neg_inf = np.array(-np.inf, dtype=s.dtype)
    if lb_blk is None:
        return np.where(valid, s, neg_inf), s, None, gaps, valid
    with np.errstate(under="ignore"):
        factors = np.exp(np.maximum(gaps, 0) * lb_blk[..., None, :])
    return np.where(valid, factors * s, neg_inf), s, factors, gaps, valid


def gated_attention_tiled(
    q: Array,
    k: Array,
    v: Array,
    betas: Array | None = None,
    tile: int = 32,
    scale: float | None = None,
    log_betas: Array | None = None,
    with_lse: bool = False,
):
    """Streaming-tile forward, numerically equivalent to the dense path.

    Peak extra memory is O(tile*d + tile^2) per stacked head: blocks of
    logits are folded into running (max, denominator, numerator)
    accumulators via online log-sum-exp. With ``with_lse`` the per-row
    log-sum-exp is returned alongside the output (the tiled backward
    reuses it).
    """
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    require_finite(q, k, v, what="attention input")
    lb = _log_betas_from(betas, log_betas)
    sc = _default_scale(q.shape[-1], scale)
    T = q.shape[-2]
    lead = q.shape[:-2]
    out = np.zeros_like(q)
    lse = np.full(lead + (T,), -np.inf, dtype=q.dtype)
    positions = np.arange(T)

    for r0 in range(0, T, tile):
        r1 = min(r0 + tile, T)
        rows = positions[r0:r1]
        q_blk = q[..., r0:r1, :]
        m = np.full(lead + (r1 - r0,), -np.inf, dtype=q.dtype)
        denom = np.zeros(lead + (r1 - r0,), dtype=q.dtype)
        acc = np.zeros(lead + (r1 - r0, q.shape[-1]), dtype=q.dtype)
        for c0 in range(0, r1, tile):
            c1 = min(c0 + tile, r1)
            cols = positions[c0:c1]
            lb_blk = None if lb is None else lb[..., c0:c1]
            logits, _, _, _, valid = _block_logits(q_blk, k[..., c0:c1, :], lb_blk, rows, cols, sc)
            blk_max = np.max(logits, axis=-1)
            new_m = np.maximum(m, blk_max)
            finite = ~np.isneginf(new_m)
            with np.errstate(invalid="ignore"):
                corr = np.where(finite, np.exp(m - new_m), np.array(1.0, dtype=q.dtype))
                p = np.exp(logits - new_m[..., None])
            p = np.where(np.isneginf(logits), np.array(0.0, dtype=p.dtype), p)
            denom = corr * denom + np.sum(p, axis=-1)
            acc = corr[..., None] * acc + p @ v[..., c0:c1, :]
            m = new_m
        out[..., r0:r1, :] = acc / denom[..., None]
        lse[..., r0:r1] = m + np.log(denom)
    if with_lse:
        return out, lse
    return out


def gated_attention_tiled_bwd(
    q: Array,
    k: Array,
    v: Array,
    betas: Array | None,
    grad_out: Array,
    tile: int = 32,
    scale: float | None = None,
    log_betas: Array | None = None,
    beta_grad_in_log_domain: bool = False,
):
    """Two-pass tiled backward: forward pass for (out, lse), then block-wise
    gradient accumulation. Same return convention as
    :func:`gated_attention_bwd`; never materializes a T x T matrix.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    grad_out = np.asarray(grad_out)
    lb = _log_betas_from(betas, log_betas)
    sc = _default_scale(q.shape[-1], scale)
    out, lse = gated_attention_tiled(q, k, v, tile=tile, scale=sc, log_betas=lb, with_lse=True)

    T = q.shape[-2]
    positions = np.arange(T)
    delta = np.sum(grad_out * out, axis=-1)
    grad_q = np.zeros_like(q)
    grad_k = np.zeros_like(k)
    grad_v = np.zeros_like(v)
    g_log_beta = None if lb is None else np.zeros_like(lb)
    sc_arr = np.asarray(sc, dtype=q.dtype)

    for r0 in range(0, T, tile):
        r1 = min(r0 + tile, T)
        rows = positions[r0:r1]
        q_blk = q[..., r0:r1, :]
        go_blk = grad_out[..., r0:r1, :]
        lse_blk = lse[..., r0:r1]
        delta_blk = delta[..., r0:r1]
        for c0 in range(0, r1, tile):
            c1 = min(c0 + tile, r1)
            cols = positions[c0:c1]
            lb_blk = None if lb is None else lb[..., c0:c1]
            logits, s, factors, gaps, valid = _block_logits(
                q_blk, k[..., c0:c1, :], lb_blk, rows, cols, sc
            )
            with np.errstate(invalid="ignore"):
                p = np.exp(logits - lse_blk[..., None])
            p = np.where(np.isneginf(logits), np.array(0.0, dtype=p.dtype), p)
            g_p = go_blk @ np.swapaxes(v[..., c0:c1, :], -1, -2)
            g_logits = p * (g_p - delta_blk[..., None])
            g_s = g_logits if factors is None else g_logits * factors
            scaled = g_s * sc_arr
            grad_q[..., r0:r1, :] += scaled @ k[..., c0:c1, :]
            grad_k[..., c0:c1, :] += np.swapaxes(scaled, -1, -2) @ q_blk
            grad_v[..., c0:c1, :] += np.swapaxes(p, -1, -2) @ go_blk
            if factors is not None:
                g_factors = np.where(valid, g_logits * s, 0.0)
                g_log_beta[..., c0:c1] += np.sum(g_factors * gaps * factors, axis=-2)

    if g_log_beta is None:
        grad_beta = None
    elif beta_grad_in_log_domain:
        grad_beta = g_log_beta
    else:
        grad_beta = g_log_beta * np.exp(-lb)
    return grad_q, grad_k, grad_v, grad_beta

"""Retention gates: map a token's hidden state to a per-KV-head retention
score in (0, 1), plus the decayed log-domain score used for eviction.

Gate logits are clamped to [-69, 27.6] before the log-sigmoid so scores
stay strictly inside (0, 1): log-scores land in [log(1e-30), -1e-12] and
remain totally ordered and finite at any gap. All score comparisons happen
in the log domain; linear-domain powers are only materialized for exports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, OrderingError

Array = np.ndarray

LOGIT_MIN = -69.0
LOGIT_MAX = 27.6


def _sigmoid(x):
    # 1/(1+exp(-x)) is IEEE-exact at both tails (overflow -> inf -> 0,
    # underflow -> 0 -> 1); much faster than the logaddexp formulation
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0.0).astype(x.dtype)


def _tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _gelu_tanh(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _gelu_tanh_grad(x):
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x**2)


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "gelu": (_gelu_tanh, _gelu_tanh_grad),
}


@dataclass
class GateParams:
    """Two-matrix gate MLP (or a single linear map) plus per-KV-head bias.

    For ``variant="linear"`` the input map collapses to a single
    ``d_model x n_kv_heads`` matrix stored in ``w_in`` and ``w_out`` is None.
    """

    w_in: Array
    w_out: Array | None
    bias: Array
    activation: str = "silu"
    variant: str = "mlp"

    def __post_init__(self):
        if self.variant not in ("mlp", "linear"):
            raise ConfigError(f"unknown gate variant {self.variant!r}")
        if self.variant == "mlp":
            if self.w_out is None:
                raise ConfigError("mlp gate variant requires w_out")
            if self.w_in.shape[1] < 1:
                raise ConfigError("gate hidden dimension must be >= 1")
            if self.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown gate activation {self.activation!r}")
        if not np.isfinite(self.bias).all():
            raise ConfigError("gate bias must be finite")

    @property
    def n_kv_heads(self) -> int:
        return self.bias.shape[0]

    def named(self, prefix: str) -> dict[str, Array]:
        out = {f"{prefix}.w_in": self.w_in, f"{prefix}.bias": self.bias}
        if self.w_out is not None:
            out[f"{prefix}.w_out"] = self.w_out
        return out


@dataclass
class RetentionScores:
    """Per-token, per-KV-head retention: ``betas = exp(log_betas)``."""

    betas: Array
    log_betas: Array


def init_gate_params(
    d_model: int,
    n_kv_heads: int,
    h_gate: int = 512,
    variant: str = "mlp",
    activation: str = "silu",
    bias_init: float = 8.0,
    weight_std: float = 0.02,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> GateParams:
    """Zero-mean std-0.02 weights and a large positive bias so training
    starts with essentially no forgetting (mean beta ~ sigmoid(8))."""
    rng = rng or np.random.default_rng(0)
    if variant == "linear":
        w_in = rng.normal(0.0, weight_std, (d_model, n_kv_heads)).astype(dtype)
        w_out = None
    else:
        w_in = rng.normal(0.0, weight_std, (d_model, h_gate)).astype(dtype)
        w_out = rng.normal(0.0, weight_std, (h_gate, n_kv_heads)).astype(dtype)
    bias = np.full(n_kv_heads, bias_init, dtype=dtype)
    return GateParams(w_in=w_in, w_out=w_out, bias=bias, activation=activation, variant=variant)


def _raw_logits(x: Array, p: GateParams) -> Array:
    if x.shape[-1] != p.w_in.shape[0]:
        raise DimensionError(
            f"gate input width {x.shape[-1]} does not match w_in {p.w_in.shape}"
        )
    if p.variant == "linear":
        return x @ p.w_in + p.bias
    act, _ = ACTIVATIONS[p.activation]
    return act(x @ p.w_in) @ p.w_out + p.bias


def gate_forward(x: Array, p: GateParams) -> RetentionScores:
    """Retention scores for hidden states ``x`` of shape ``(..., T, d_model)``.

    Returns betas/log_betas of shape ``(..., T, n_kv_heads)``.
    """
    x = np.asarray(x)
    z = np.clip(_raw_logits(x, p), LOGIT_MIN, LOGIT_MAX)
    log_betas = -np.logaddexp(np.array(0.0, dtype=z.dtype), -z)
    return RetentionScores(betas=np.exp(log_betas), log_betas=log_betas)


def gate_backward(x: Array, p: GateParams, grad_log_betas: Array):
    """Gradients of ``log_betas`` w.r.t. the gate input and parameters.

    Returns ``(grad_x, grads)`` where ``grads`` maps ``"w_in"``/``"w_out"``/
    ``"bias"`` to arrays shaped like the parameters. The clamp on the raw
    logits zeroes gradients outside (LOGIT_MIN, LOGIT_MAX).
    """
    x = np.asarray(x)
    grad_log_betas = np.asarray(grad_log_betas)
    z_raw = _raw_logits(x, p)
    if grad_log_betas.shape != z_raw.shape:
        raise DimensionError(
            f"grad shape {grad_log_betas.shape} does not match logits {z_raw.shape}"
        )
    z = np.clip(z_raw, LOGIT_MIN, LOGIT_MAX)
    # d log_sigmoid(z) / dz = sigmoid(-z), computed in log space for stability
    dz = grad_log_betas * np.exp(-np.logaddexp(np.array(0.0, dtype=z.dtype), z))
    dz = np.where((z_raw > LOGIT_MIN) & (z_raw < LOGIT_MAX), dz, 0.0)

    flat_x = x.reshape(-1, x.shape[-1])
    flat_dz = dz.reshape(-1, dz.shape[-1])
    grads: dict[str, Array] = {"bias": flat_dz.sum(axis=0)}
    if p.variant == "linear":
        grads["w_in"] = flat_x.T @ flat_dz
        grad_x = (dz @ p.w_in.T).reshape(x.shape)
        return grad_x, grads

    act, act_grad = ACTIVATIONS[p.activation]
    hpre = x @ p.w_in
    h = act(hpre)
    grads["w_out"] = h.reshape(-1, h.shape[-1]).T @ flat_dz
    dh = dz @ p.w_out.T
    dhpre = dh * act_grad(hpre)
    grads["w_in"] = flat_x.T @ dhpre.reshape(-1, dhpre.shape[-1])
    grad_x = (dhpre @ p.w_in.T).reshape(x.shape)
    return grad_x, grads


def decayed_score(log_beta: float, t: int, i: int) -> float:
    """Log-domain retention of the token created at ``i`` when the clock is
    at ``t``: ``(t - i) * log_beta``. Larger means more retained; the newest
    token (t == i) always scores 0.
    """
    if t < i:
        raise OrderingError(f"decayed_score needs t >= i, got t={t}, i={i}")
    return (t - i) * float(log_beta)

"""Desk-scale decoder-only transformer with two modes sharing one set of
frozen base weights: teacher (standard causal attention) and student (same
computation with every attention logit multiplied by the decayed retention
factor). Supports grouped-query attention and rotary position embeddings;
keys are always rotated before they are consumed or cached.

The backward pass is written by hand and returns gradients for base
weights and/or gate parameters; the trainer decides which side it updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attnkern
from .errors import ConfigError
from .gates import ACTIVATIONS, GateParams, RetentionScores, gate_backward, gate_forward, init_gate_params

Array = np.ndarray


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 4
    d_model: int = 128
    d_head: int = 16
    d_ff: int = 512
    vocab_size: int = 64
    max_seq: int = 1024
    rope_theta: float = 10000.0
    use_scale: bool = True
    activation: str = "silu"
    gate_hidden: int = 512
    gate_variant: str = "mlp"
    gate_bias_init: float = 8.0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.d_head % 2 != 0:
            raise ConfigError(f"d_head must be even for rotary embeddings, got {self.d_head}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def scale(self) -> float:
        return self.d_head**-0.5 if self.use_scale else 1.0

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "rope_theta": self.rope_theta,
            "use_scale": self.use_scale,
            "activation": self.activation,
            "gate_hidden": self.gate_hidden,
            "gate_variant": self.gate_variant,
            "gate_bias_init": self.gate_bias_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    logits: Array
    retention: list[RetentionScores] | None = None
    hidden_taps: list[Array] | None = None


RMS_EPS = 1e-6


def rmsnorm(x: Array, w: Array) -> Array:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * w


def rmsnorm_bwd(x: Array, w: Array, gy: Array):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    gw = np.sum(gy * x * inv, axis=tuple(range(x.ndim - 1)))
    gyw = gy * w
    dot = np.sum(gyw * x, axis=-1, keepdims=True)
    gx = inv * gyw - x * (inv**3) * dot / x.shape[-1]
    return gx, gw


def rope_tables(positions: Array, d_head: int, theta: float, dtype=np.float64):
    """cos/sin tables of shape (T, d_head/2) for the given absolute positions."""
    if d_head % 2 != 0:
        raise ConfigError(f"d_head must be even for rotary embeddings, got {d_head}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = positions[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate(x: Array, cos: Array, sin: Array) -> Array:
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(q: Array, k: Array, positions: Array, theta: float = 10000.0):
    """Rotate query/key vectors (shape ``(..., T, d_head)``) by their
    position-dependent angles. Keys come out post-rotation, so cached keys
    never need re-rotation after eviction.
    """
    q = np.asarray(q)
    cos, sin = rope_tables(positions, q.shape[-1], theta, dtype=q.dtype)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


def rope_inverse(g: Array, positions: Array, theta: float) -> Array:
    """Backward of the rotation: rotate gradients by the negated angle."""
    cos, sin = rope_tables(positions, g.shape[-1], theta, dtype=g.dtype)
    return _rotate(g, cos, -sin)


def init_weights(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Array]:
    std = 0.02
    w: dict[str, Array] = {"embed": rng.normal(0.0, std, (cfg.vocab_size, cfg.d_model)).astype(dtype)}
    qdim = cfg.n_heads * cfg.d_head
    kvdim = cfg.n_kv_heads * cfg.d_head
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        w[f"{p}.ln1.weight"] = np.ones(cfg.d_model, dtype=dtype)
        w[f"{p}.attn.wq"] = rng.normal(0.0, std, (cfg.d_model, qdim)).astype(dtype)
        w[f"{p}.attn.wk"] = rng.normal(0.0, std, (cfg.d_model, kvdim)).astype(dtype)
        w[f"{p}.attn.wv"] = rng.normal(0.0, std, (cfg.d_model, kvdim)).astype(dtype)
        w[f"{p}.attn.wo"] = rng.normal(0.0, std, (qdim, cfg.d_model)).astype(dtype)
        w[f"{p}.ln2.weight"] = np.ones(cfg.d_model, dtype=dtype)
        w[f"{p}.mlp.w1"] = rng.normal(0.0, std, (cfg.d_model, cfg.d_ff)).astype(dtype)
        w[f"{p}.mlp.w2"] = rng.normal(0.0, std, (cfg.d_ff, cfg.d_model)).astype(dtype)
    w["ln_f.weight"] = np.ones(cfg.d_model, dtype=dtype)
    return w


def init_gates(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> list[GateParams]:
    return [
        init_gate_params(
            cfg.d_model,
            cfg.n_kv_heads,
            h_gate=cfg.gate_hidden,
            variant=cfg.gate_variant,
            activation=cfg.activation,
            bias_init=cfg.gate_bias_init,
            rng=rng,
            dtype=dtype,
        )
        for _ in range(cfg.n_layers)
    ]


def _split_heads(x: Array, n: int, d: int) -> Array:
    # (B, T, n*d) -> (B, n, T, d)
    B, T = x.shape[0], x.shape[1]
    return x.reshape(B, T, n, d).transpose(0, 2, 1, 3)


def _merge_heads(x: Array) -> Array:
    # (B, n, T, d) -> (B, T, n*d)
    B, n, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, n * d)


def _expand_kv(x: Array, group: int) -> Array:
    # (B, Hk, ...) -> (B, Hk*group, ...); query head h reads kv head h // group
    return np.repeat(x, group, axis=1)


def _reduce_kv(x: Array, group: int) -> Array:
    B, H = x.shape[0], x.shape[1]
    return x.reshape(B, H // group, group, *x.shape[2:]).sum(axis=2)


def forward(
    tokens: Array,
    cfg: ModelConfig,
    weights: dict[str, Array],
    gates: list[GateParams] | None = None,
    want_tape: bool = False,
    want_taps: bool = False,
):
    """Run the transformer. With ``gates`` the attention is retention-gated
    (student mode) and per-layer retention scores are returned; without,
    it is the plain teacher. Returns ``ForwardOutput`` or
    ``(ForwardOutput, tape)`` when a backward pass will follow.
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if T > cfg.max_seq:
        raise ConfigError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")
    if gates is not None and len(gates) != cfg.n_layers:
        raise ConfigError(f"need {cfg.n_layers} gate blocks, got {len(gates)}")

    positions = np.arange(T)
    act, _ = ACTIVATIONS[cfg.activation]
    h = weights["embed"][tokens]
    retention: list[RetentionScores] | None = [] if gates is not None else None
    taps: list[Array] | None = [] if want_taps else None
    tape: list[dict] | None = [] if want_tape else None

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h_in = h
        a_in = rmsnorm(h_in, weights[f"{p}.ln1.weight"])
        q = _split_heads(a_in @ weights[f"{p}.attn.wq"], cfg.n_heads, cfg.d_head)
        k = _split_heads(a_in @ weights[f"{p}.attn.wk"], cfg.n_kv_heads, cfg.d_head)
        v = _split_heads(a_in @ weights[f"{p}.attn.wv"], cfg.n_kv_heads, cfg.d_head)
        q, k = apply_rope(q, k, positions, cfg.rope_theta)

        if gates is not None:
            scores = gate_forward(a_in, gates[i])
            retention.append(scores)
            # (B, T, Hk) -> (B, H, T): each query head reuses its KV head's betas
            lb = _expand_kv(scores.log_betas.transpose(0, 2, 1), cfg.group_size)
        else:
            lb = None

        kE = _expand_kv(k, cfg.group_size)
        vE = _expand_kv(v, cfg.group_size)
        if lb is None:
            o = attnkern.causal_attention_fwd(q, kE, vE, scale=cfg.scale)
        else:
            o = attnkern.gated_attention_fwd(q, kE, vE, scale=cfg.scale, log_betas=lb)
        o_merged = _merge_heads(o)
        h_mid = h_in + o_merged @ weights[f"{p}.attn.wo"]

        m_in = rmsnorm(h_mid, weights[f"{p}.ln2.weight"])
        hpre = m_in @ weights[f"{p}.mlp.w1"]
        h = h_mid + act(hpre) @ weights[f"{p}.mlp.w2"]

        if want_taps:
            taps.append(a_in)
        if want_tape:
            tape.append(
                {
                    "h_in": h_in,
                    "a_in": a_in,
                    "q": q,
                    "k": k,
                    "v": v,
                    "lb": lb,
                    "o_merged": o_merged,
                    "h_mid": h_mid,
                    "m_in": m_in,
                    "hpre": hpre,
                }
            )

    hF = rmsnorm(h, weights["ln_f.weight"])
    logits = hF @ weights["embed"].T

    if squeeze:
        logits_out = logits[0]
        retention_out = (
            [RetentionScores(r.betas[0], r.log_betas[0]) for r in retention]
            if retention is not None
            else None
        )
        taps_out = [t[0] for t in taps] if taps is not None else None
    else:
        logits_out, retention_out, taps_out = logits, retention, taps
    out = ForwardOutput(logits=logits_out, retention=retention_out, hidden_taps=taps_out)
    if not want_tape:
        return out
    full_tape = {"tokens": tokens, "layers": tape, "h_last": h, "hF": hF, "squeeze": squeeze}
    return out, full_tape


def forward_teacher(tokens, cfg, weights, **kw):
    return forward(tokens, cfg, weights, gates=None, **kw)


def forward_student(tokens, cfg, weights, gates, **kw):
    if gates is None:
        raise ConfigError("student mode requires gates")
    return forward(tokens, cfg, weights, gates=gates, **kw)


def backward(
    tape: dict,
    grad_logits: Array,
    cfg: ModelConfig,
    weights: dict[str, Array],
    gates: list[GateParams] | None = None,
    grad_log_betas_extra: list[Array] | None = None,
    want_base_grads: bool = True,
):
    """Reverse pass matching :func:`forward` with ``want_tape=True``.

    ``grad_log_betas_extra`` adds per-layer ``(B, T, Hk)`` gradients that
    bypass the logits (the capacity loss feeds in here). Returns
    ``(base_grads, gate_grads)``; either side is None when not requested.
    """
    tokens = tape["tokens"]
    B, T = tokens.shape
    positions = np.arange(T)
    act_fn, act_grad = ACTIVATIONS[cfg.activation]
    grad_logits = np.asarray(grad_logits)
    if tape["squeeze"] and grad_logits.ndim == 2:
        grad_logits = grad_logits[None, :]

    base: dict[str, Array] | None = {} if want_base_grads else None
    gate_grads: list[dict] | None = [None] * cfg.n_layers if gates is not None else None

    def add(name, val):
        if base is None:
            return
        if name in base:
            base[name] += val
        else:
            base[name] = val

    hF = tape["hF"]
    g_hF = grad_logits @ weights["embed"]
    if base is not None:
        add("embed", np.einsum("btv,btd->vd", grad_logits, hF))
    g_h, g_wlnf = rmsnorm_bwd(tape["h_last"], weights["ln_f.weight"], g_hF)
    add("ln_f.weight", g_wlnf)

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        lt = tape["layers"][i]
        flat = lambda x: x.reshape(-1, x.shape[-1])

        # MLP block
        g_mlp_out = g_h
        if base is not None:
            add(f"{p}.mlp.w2", flat(act_fn(lt["hpre"])).T @ flat(g_mlp_out))
        g_acth = g_mlp_out @ weights[f"{p}.mlp.w2"].T
        g_hpre = g_acth * act_grad(lt["hpre"])
        if base is not None:
            add(f"{p}.mlp.w1", flat(lt["m_in"]).T @ flat(g_hpre))
        g_m_in = g_hpre @ weights[f"{p}.mlp.w1"].T
        g_from_norm, g_wln2 = rmsnorm_bwd(lt["h_mid"], weights[f"{p}.ln2.weight"], g_m_in)
        add(f"{p}.ln2.weight", g_wln2)
        g_h_mid = g_h + g_from_norm

        # attention block
        g_attn_proj = g_h_mid
        if base is not None:
            add(f"{p}.attn.wo", flat(lt["o_merged"]).T @ flat(g_attn_proj))
        g_o = _split_heads(g_attn_proj @ weights[f"{p}.attn.wo"].T, cfg.n_heads, cfg.d_head)

        kE = _expand_kv(lt["k"], cfg.group_size)
        vE = _expand_kv(lt["v"], cfg.group_size)
        gq, gkE, gvE, g_lbE = attnkern.gated_attention_bwd(
            lt["q"], kE, vE, None, g_o, scale=cfg.scale,
            log_betas=lt["lb"], beta_grad_in_log_domain=True,
        )
        gk = _reduce_kv(gkE, cfg.group_size)
        gv = _reduce_kv(gvE, cfg.group_size)

        gq = rope_inverse(gq, positions, cfg.rope_theta)
        gk = rope_inverse(gk, positions, cfg.rope_theta)

        gq_flat = _merge_heads(gq)
        gk_flat = _merge_heads(gk)
        gv_flat = _merge_heads(gv)
        g_a_in = (
            gq_flat @ weights[f"{p}.attn.wq"].T
            + gk_flat @ weights[f"{p}.attn.wk"].T
            + gv_flat @ weights[f"{p}.attn.wv"].T
        )
        if base is not None:
            a_flat = flat(lt["a_in"])
            add(f"{p}.attn.wq", a_flat.T @ flat(gq_flat))
            add(f"{p}.attn.wk", a_flat.T @ flat(gk_flat))
            add(f"{p}.attn.wv", a_flat.T @ flat(gv_flat))

        if gates is not None:
            g_lb = _reduce_kv(g_lbE, cfg.group_size).transpose(0, 2, 1)  # (B, T, Hk)
            if grad_log_betas_extra is not None and grad_log_betas_extra[i] is not None:
                g_lb = g_lb + grad_log_betas_extra[i]
            gx, grads_i = gate_backward(lt["a_in"], gates[i], g_lb)
            gate_grads[i] = grads_i
            g_a_in = g_a_in + gx

        g_from_norm, g_wln1 = rmsnorm_bwd(lt["h_in"], weights[f"{p}.ln1.weight"], g_a_in)
        add(f"{p}.ln1.weight", g_wln1)
        g_h = g_h_mid + g_from_norm

    if base is not None:
        g_embed_rows = np.zeros_like(weights["embed"])
        np.add.at(g_embed_rows, tokens.reshape(-1), g_h.reshape(-1, cfg.d_model))
        add("embed", g_embed_rows)
    return base, gate_grads

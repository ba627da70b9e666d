"""Bounded KV-cache inference: per-layer/per-KV-head entry stores, eviction
policies (learned retention plus the heuristic baselines), decode and
chunked-prefill engines, eviction-trace recording, attention-deviation
replay, and a brute-force optimal-eviction search for tiny instances.

Decode follows attend-then-evict: the new token is appended, attention runs
over the transient set (up to M+1 entries), then the store is trimmed back
to the budget. Inference never modulates logits with retention scores; the
gates only rank eviction candidates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ConfigError, SizeGuardError, StateError
from .gates import GateParams, gate_forward

Array = np.ndarray

TRACE_MAGIC = b"TRIMTRC1"


@dataclass
class CacheEntry:
    key: Array  # post-RoPE
    value: Array
    log_beta: float
    position: int
    acc: float = 0.0  # accumulated attention mass (h2o bookkeeping)


# ---------------------------------------------------------------------------
# eviction policies


class TrimKVPolicy:
    """Evict the entry with the lowest decayed retention score
    ``(t - position) * log_beta``; ties break toward the oldest entry.
    The newest entry scores exactly 0 and is never strictly minimal while
    every stored log-beta is negative.
    """

    name = "trimkv"

    def choose(self, entries: list[CacheEntry], t: int, budget: int) -> int:
        best = 0
        best_score = (t - entries[0].position) * entries[0].log_beta
        for i in range(1, len(entries)):
            score = (t - entries[i].position) * entries[i].log_beta
            if score < best_score:
                best, best_score = i, score
        return best


class RecencyWindowPolicy:
    """Sliding window: always evict the oldest entry."""

    name = "recency_window"

    def choose(self, entries, t, budget):
        return 0


class SinkWindowPolicy:
    """Protect the first ``sinks`` sequence positions, then evict the oldest
    non-sink entry (simplified StreamingLLM)."""

    name = "sink_window"

    def __init__(self, sinks: int = 4):
        if sinks < 0:
            raise ConfigError(f"sink count must be >= 0, got {sinks}")
        self.sinks = sinks

    def choose(self, entries, t, budget):
        if self.sinks >= budget:
            raise ConfigError(f"sink count {self.sinks} must be < budget {budget}")
        for i, e in enumerate(entries):
            if e.position >= self.sinks:
                return i
        return 0  # all sinks (cannot happen once size > budget > sinks)


class H2OPolicy:
    """Evict the minimum accumulated attention mass outside a protected
    recent window (half the budget unless configured otherwise)."""

    name = "h2o"

    def __init__(self, window: int | None = None):
        self.window = window

    def choose(self, entries, t, budget):
        window = max(1, budget // 2) if self.window is None else max(1, self.window)
        candidates = entries[:-window] if window < len(entries) else entries[:-1]
        best = 0
        best_acc = candidates[0].acc
        for i in range(1, len(candidates)):
            if candidates[i].acc < best_acc:
                best, best_acc = i, candidates[i].acc
        return best


class RandomPolicy:
    """Evict uniformly among all entries except the newest (seeded)."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def choose(self, entries, t, budget):
        return int(self.rng.integers(0, len(entries) - 1))


def parse_policy(spec: str):
    """Factory from a policy spec string: ``trimkv``, ``recency_window``,
    ``sink_window:<s>``, ``h2o[:window]``, ``random[:seed]``. Each call of
    the returned factory builds an independent policy instance (per head).
    """
    name, _, arg = spec.partition(":")
    if name == "trimkv":
        return lambda: TrimKVPolicy()
    if name == "recency_window":
        return lambda: RecencyWindowPolicy()
    if name == "sink_window":
        sinks = int(arg) if arg else 4
        return lambda: SinkWindowPolicy(sinks)
    if name == "h2o":
        window = int(arg) if arg else None
        return lambda: H2OPolicy(window)
    if name == "random":
        seed = int(arg) if arg else 0
        counter = [0]

        def make():
            counter[0] += 1
            return RandomPolicy(seed + counter[0])

        return make
    raise ConfigError(f"unknown eviction policy {spec!r}")


def evict(entries: list[CacheEntry], budget: int, t: int, policy) -> list[int]:
    """Trim ``entries`` down to ``budget`` in place; returns evicted positions."""
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    if not entries:
        raise StateError("evict called on an empty cache")
    out = []
    while len(entries) > budget:
        idx = policy.choose(entries, t, budget)
        if idx == len(entries) - 1:
            raise StateError("policy tried to evict the newest entry")
        out.append(entries.pop(idx).position)
    return out


# ---------------------------------------------------------------------------
# eviction traces


@dataclass
class EvictionTrace:
    """Per (layer, kv head): for each recorded step t, the surviving
    position set as a bitmask int (bit i == position i alive)."""

    rows: dict[tuple[int, int], list[tuple[int, int]]] = field(default_factory=dict)

    def add(self, layer: int, head: int, t: int, positions) -> None:
        mask = 0
        for p in positions:
            mask |= 1 << int(p)
        self.rows.setdefault((layer, head), []).append((t, mask))

    def alive(self, layer: int, head: int, t: int, i: int) -> bool:
        for step, mask in self.rows[(layer, head)]:
            if step == t:
                return bool(mask >> i & 1)
        raise KeyError(f"no trace row for step {t}")

    def is_monotone(self) -> bool:
        """True iff no position ever reappears after being dropped."""
        for rows in self.rows.values():
            dropped = 0
            prev = 0
            for idx, (_t, mask) in enumerate(rows):
                if idx > 0:
                    if (mask & ~prev) & dropped:
                        return False
                    dropped |= prev & ~mask
                prev = mask
        return True


def write_trace_csv(trace: EvictionTrace, layer: int, head: int, path) -> None:
    """Rows ``t,i,alive`` for every i <= t at every recorded step."""
    rows = trace.rows[(layer, head)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,i,alive\n")
        for t, mask in rows:
            for i in range(t + 1):
                fh.write(f"{t},{i},{mask >> i & 1}\n")


def save_trace_bits(trace: EvictionTrace, path) -> None:
    """Compact binary form: magic, u32 record count, then per record
    layer/head/t/nbytes (u32 each) and the little-endian bitset bytes."""
    records = []
    for (layer, head), rows in sorted(trace.rows.items()):
        for t, mask in rows:
            nbytes = max(1, (t + 8) // 8)
            records.append((layer, head, t, mask.to_bytes(nbytes, "little")))
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for layer, head, t, blob in records:
            fh.write(struct.pack("<IIII", layer, head, t, len(blob)))
            fh.write(blob)


def load_trace_bits(path) -> EvictionTrace:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != TRACE_MAGIC:
        raise StateError(f"{path}: bad trace magic {data[:8]!r}")
    (count,) = struct.unpack("<I", data[8:12])
    off = 12
    trace = EvictionTrace()
    for _ in range(count):
        layer, head, t, nbytes = struct.unpack("<IIII", data[off : off + 16])
        off += 16
        mask = int.from_bytes(data[off : off + nbytes], "little")
        off += nbytes
        trace.rows.setdefault((layer, head), []).append((t, mask))
    return trace


# ---------------------------------------------------------------------------
# decode engine


class DecodeEngine:
    """Single-sequence bounded-cache decoder over frozen weights.

    ``budget=None`` disables eviction (full cache). One policy instance per
    (layer, kv head); gates are optional for policies that ignore retention.
    """

    def __init__(self, cfg: M.ModelConfig, weights: dict[str, Array],
                 gates: list[GateParams] | None = None, budget: int | None = None,
                 policy: str = "trimkv", record_trace: bool = False):
        if budget is not None and budget < 1:
            raise ConfigError(f"budget must be >= 1, got {budget}")
        self.cfg = cfg
        self.weights = weights
        self.gates = gates
        self.budget = budget
        factory = parse_policy(policy)
        self.policies = [[factory() for _ in range(cfg.n_kv_heads)]
                         for _ in range(cfg.n_layers)]
        self.caches: list[list[list[CacheEntry]]] = [
            [[] for _ in range(cfg.n_kv_heads)] for _ in range(cfg.n_layers)
        ]
        self.t = 0
        self.trace = EvictionTrace() if record_trace else None
        self.log_beta_history = [
            [[] for _ in range(cfg.n_kv_heads)] for _ in range(cfg.n_layers)
        ]
        self.compression_events = 0

    def step(self, token: int) -> Array:
        """One decode step (append, attend, evict); returns the token's logits."""
        return self.process_chunk(np.array([token]))[0]

    def prefill(self, tokens, chunk_size: int | None = None) -> Array:
        """Consume a prompt; returns the logits of its final position."""
        tokens = np.asarray(tokens)
        if chunk_size is None:
            chunk_size = len(tokens)
        if chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
        logits = None
        for c0 in range(0, len(tokens), chunk_size):
            logits = self.process_chunk(tokens[c0 : c0 + chunk_size])
        return logits[-1]

    def process_chunk(self, tokens: Array) -> Array:
        """Forward a chunk with full attention over (cache + chunk prefix),
        then compress every head back to the budget."""
        cfg = self.cfg
        w = self.weights
        tokens = np.asarray(tokens)
        C = len(tokens)
        positions = np.arange(self.t, self.t + C)
        act, _ = M.ACTIVATIONS[cfg.activation]
        h = w["embed"][tokens]  # (C, D)

        for l in range(cfg.n_layers):
            p = f"layers.{l}"
            a_in = M.rmsnorm(h, w[f"{p}.ln1.weight"])
            q = (a_in @ w[f"{p}.attn.wq"]).reshape(C, cfg.n_heads, cfg.d_head)
            k = (a_in @ w[f"{p}.attn.wk"]).reshape(C, cfg.n_kv_heads, cfg.d_head)
            v = (a_in @ w[f"{p}.attn.wv"]).reshape(C, cfg.n_kv_heads, cfg.d_head)
            cos, sin = M.rope_tables(positions, cfg.d_head, cfg.rope_theta, dtype=q.dtype)
            q = M._rotate(q.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
            k = M._rotate(k.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
            if self.gates is not None:
                lb = gate_forward(a_in, self.gates[l]).log_betas  # (C, Hk)
            else:
                lb = np.zeros((C, cfg.n_kv_heads), dtype=h.dtype)

            attn = np.empty((C, cfg.n_heads, cfg.d_head), dtype=h.dtype)
            for hk in range(cfg.n_kv_heads):
                entries = self.caches[l][hk]
                for c in range(C):
                    entries.append(
                        CacheEntry(key=k[c, hk], value=v[c, hk],
                                   log_beta=float(lb[c, hk]), position=int(positions[c]))
                    )
                    self.log_beta_history[l][hk].append(float(lb[c, hk]))
                K = np.stack([e.key for e in entries])
                V = np.stack([e.value for e in entries])
                entry_pos = np.array([e.position for e in entries])
                causal = entry_pos[None, :] <= positions[:, None]  # (C, S)
                for g in range(cfg.group_size):
                    hq = hk * cfg.group_size + g
                    logits = (q[:, hq] @ K.T) * cfg.scale
                    logits = np.where(causal, logits, -np.inf)
                    row_max = logits.max(axis=-1, keepdims=True)
                    pw = np.exp(logits - row_max)
                    pw = np.where(causal, pw, 0.0)
                    denom = pw.sum(axis=-1, keepdims=True)
                    attn[:, hq] = (pw @ V) / denom
                    weights_mass = (pw / denom).sum(axis=0).astype(np.float64)
                    for i, e in enumerate(entries):
                        e.acc += float(weights_mass[i])
            h = h + attn.reshape(C, cfg.n_heads * cfg.d_head) @ w[f"{p}.attn.wo"]
            m_in = M.rmsnorm(h, w[f"{p}.ln2.weight"])
            h = h + act(m_in @ w[f"{p}.mlp.w1"]) @ w[f"{p}.mlp.w2"]

        self.t += C
        step_t = self.t - 1
        if self.budget is not None:
            self.compression_events += 1
            for l in range(cfg.n_layers):
                for hk in range(cfg.n_kv_heads):
                    entries = self.caches[l][hk]
                    if len(entries) > self.budget:
                        evict(entries, self.budget, step_t, self.policies[l][hk])
        if self.trace is not None:
            for l in range(cfg.n_layers):
                for hk in range(cfg.n_kv_heads):
                    self.trace.add(l, hk, step_t,
                                   (e.position for e in self.caches[l][hk]))

        hF = M.rmsnorm(h, w["ln_f.weight"])
        return hF @ w["embed"].T

    def cache_sizes(self) -> list[list[int]]:
        return [[len(hc) for hc in layer] for layer in self.caches]


def decode_step(engine: DecodeEngine, token: int):
    """Single decoding step through the engine: returns (logits, engine)."""
    logits = engine.step(token)
    return logits, engine


def chunked_prefill(tokens, chunk_size: int, budget: int | None, cfg, weights,
                    gates=None, policy: str = "trimkv",
                    record_trace: bool = False) -> DecodeEngine:
    """Process a prompt chunk-by-chunk under the budget; returns the engine
    (cache holds at most ``budget`` entries per head)."""
    engine = DecodeEngine(cfg, weights, gates=gates, budget=budget, policy=policy,
                          record_trace=record_trace)
    engine.prefill(np.asarray(tokens), chunk_size=chunk_size)
    return engine


# ---------------------------------------------------------------------------
# recorded runs and attention-deviation replay


@dataclass
class RecordedRun:
    """Teacher-forced full-attention streams for one sequence: per layer,
    post-RoPE q/k/v plus the gate scores evaluated on the attention inputs
    (inference-style: scores rank eviction only)."""

    tokens: Array
    q: list[Array]  # (H, T, dh) per layer
    k: list[Array]  # (Hk, T, dh)
    v: list[Array]  # (Hk, T, dh)
    log_betas: list[Array]  # (T, Hk)
    scale: float
    n_kv_heads: int
    group_size: int

    @property
    def seq_len(self) -> int:
        return len(self.tokens)

    @property
    def n_layers(self) -> int:
        return len(self.q)


def record_run(tokens, cfg: M.ModelConfig, weights, gates: list[GateParams] | None) -> RecordedRun:
    tokens = np.asarray(tokens)
    out = M.forward_teacher(tokens, cfg, weights, want_taps=True)
    T = len(tokens)
    positions = np.arange(T)
    qs, ks, vs, lbs = [], [], [], []
    for l, a_in in enumerate(out.hidden_taps):
        p = f"layers.{l}"
        q = (a_in @ weights[f"{p}.attn.wq"]).reshape(T, cfg.n_heads, cfg.d_head)
        k = (a_in @ weights[f"{p}.attn.wk"]).reshape(T, cfg.n_kv_heads, cfg.d_head)
        v = (a_in @ weights[f"{p}.attn.wv"]).reshape(T, cfg.n_kv_heads, cfg.d_head)
        q = q.transpose(1, 0, 2)
        k = k.transpose(1, 0, 2)
        cos, sin = M.rope_tables(positions, cfg.d_head, cfg.rope_theta, dtype=q.dtype)
        qs.append(M._rotate(q, cos, sin))
        ks.append(M._rotate(k, cos, sin))
        vs.append(v.transpose(1, 0, 2))
        if gates is not None:
            lbs.append(gate_forward(a_in, gates[l]).log_betas)
        else:
            lbs.append(np.zeros((T, cfg.n_kv_heads), dtype=a_in.dtype))
    return RecordedRun(tokens=tokens, q=qs, k=ks, v=vs, log_betas=lbs,
                       scale=cfg.scale, n_kv_heads=cfg.n_kv_heads,
                       group_size=cfg.group_size)


def _softmax_1d(x: Array) -> Array:
    e = np.exp(x - x.max())
    return e / e.sum()


def head_deviation(qs: Array, k: Array, v: Array, log_betas: Array, budget: int,
                   policy, scale: float) -> float:
    """Sum over steps and group query-heads of ``||o'_t - o_t||^2`` where
    ``o'`` attends over the surviving set (attend-then-evict) and ``o``
    over the full prefix. ``qs`` is (G, T, d) or (T, d)."""
    if qs.ndim == 2:
        qs = qs[None]
    G, T, _ = qs.shape
    entries: list[CacheEntry] = []
    total = 0.0
    for t in range(T):
        entries.append(CacheEntry(key=k[t], value=v[t],
                                  log_beta=float(log_betas[t]), position=t))
        idx = np.array([e.position for e in entries])
        K_live = np.stack([e.key for e in entries])
        V_live = np.stack([e.value for e in entries])
        mass = np.zeros(len(entries))
        for g in range(G):
            w_live = _softmax_1d(scale * (K_live @ qs[g, t]))
            w_full = _softmax_1d(scale * (k[: t + 1] @ qs[g, t]))
            o_live = w_live @ V_live
            o_full = w_full @ v[: t + 1]
            total += float(np.sum((o_live - o_full) ** 2))
            mass += w_live
        for i, e in enumerate(entries):
            e.acc += float(mass[i])
        if len(entries) > budget:
            evict(entries, budget, t, policy)
    return total


def replay_deviation(run: RecordedRun, budget: int, policy_spec: str) -> float:
    """Total attention deviation of a policy at a budget on a recorded run,
    summed over layers, KV heads, group query heads, and steps."""
    factory = parse_policy(policy_spec)
    total = 0.0
    for l in range(run.n_layers):
        for hk in range(run.n_kv_heads):
            g0 = hk * run.group_size
            qs = run.q[l][g0 : g0 + run.group_size]
            total += head_deviation(
                qs, run.k[l][hk], run.v[l][hk], run.log_betas[l][:, hk],
                budget, factory(), run.scale,
            )
    return total


# ---------------------------------------------------------------------------
# brute-force optimal eviction (tiny instances)


def oracle_optimal_eviction(q: Array, k: Array, v: Array, budget: int,
                            scale: float | None = None, prune: bool = True):
    """Exhaustively search monotone eviction schedules (one victim among the
    non-newest survivors at each over-budget step) for the minimum total
    attention deviation. Returns ``(schedule, deviation, n_complete)`` where
    ``schedule[t]`` is the post-eviction survivor tuple at step t and
    ``n_complete`` counts fully evaluated schedules (equals budget**(T-budget)
    with pruning disabled).
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    T, d = q.shape
    if T > 12 or budget > 4 or d > 4 or q.ndim != 2:
        raise SizeGuardError(
            f"oracle limited to T<=12, M<=4, d<=4 single head; got T={T}, M={budget}, d={d}"
        )
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    sc = d**-0.5 if scale is None else float(scale)
    logits = sc * (q @ k.T)
    o_full = [ _softmax_1d(logits[t, : t + 1]) @ v[: t + 1] for t in range(T) ]

    best = {"dev": np.inf, "schedule": None, "complete": 0}

    def step_dev(t: int, survivors: tuple[int, ...]) -> float:
        idx = np.array(survivors)
        w = _softmax_1d(logits[t, idx])
        return float(np.sum((w @ v[idx] - o_full[t]) ** 2))

    def dfs(t: int, survivors: tuple[int, ...], dev: float, schedule: list):
        if prune and dev >= best["dev"]:
            return
        if t == T:
            best["complete"] += 1
            if dev < best["dev"]:
                best["dev"] = dev
                best["schedule"] = list(schedule)
            return
        cur = survivors + (t,)
        dev += step_dev(t, cur)
        if len(cur) <= budget:
            schedule.append(cur)
            dfs(t + 1, cur, dev, schedule)
            schedule.pop()
            return
        for victim_i in range(len(cur) - 1):
            nxt = cur[:victim_i] + cur[victim_i + 1 :]
            schedule.append(nxt)
            dfs(t + 1, nxt, dev, schedule)
            schedule.pop()

    dfs(0, (), 0.0, [])
    return best["schedule"], best["dev"], best["complete"]

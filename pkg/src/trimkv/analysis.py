"""Quantitative exports over recorded runs: decayed-retention matrices,
per-head sparsity, and deviation/accuracy-vs-budget tables, plus their
canonical CSV forms (UTF-8, LF, '.' decimal, repr-formatted floats).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import DecodeEngine, RecordedRun, replay_deviation
from .errors import SizeGuardError
from .losses import prefix_decay_sums

Array = np.ndarray

RETENTION_T_GUARD = 4096


@dataclass
class RetentionMap:
    layer: int
    head: int
    matrix: Array  # lower-triangular (T, T): beta_i ** (t - i) for i <= t


@dataclass
class SparsityReport:
    rows: list[tuple[int, int, float]]  # (layer, head, sparsity)


def _head_log_betas(run, layer: int, head: int) -> Array:
    if isinstance(run, DecodeEngine):
        return np.asarray(run.log_beta_history[layer][head], dtype=np.float64)
    if isinstance(run, RecordedRun):
        return np.asarray(run.log_betas[layer][:, head], dtype=np.float64)
    raise TypeError(f"unsupported run type {type(run).__name__}")


def _run_shape(run) -> tuple[int, int]:
    if isinstance(run, DecodeEngine):
        return len(run.log_beta_history), len(run.log_beta_history[0])
    if isinstance(run, RecordedRun):
        return run.n_layers, run.n_kv_heads
    raise TypeError(f"unsupported run type {type(run).__name__}")


def build_retention_map(run, layer: int, head: int) -> RetentionMap:
    """Materialize the lower-triangular decayed-retention matrix for one
    (layer, head) of a recorded run. Guarded to T <= 4096."""
    lb = _head_log_betas(run, layer, head)
    T = len(lb)
    if T > RETENTION_T_GUARD:
        raise SizeGuardError(f"retention map guarded to T <= {RETENTION_T_GUARD}, got {T}")
    gaps = np.arange(T)[:, None] - np.arange(T)[None, :]
    with np.errstate(under="ignore"):
        matrix = np.exp(np.maximum(gaps, 0) * lb[None, :])
    matrix = np.where(gaps >= 0, matrix, 0.0)
    return RetentionMap(layer=layer, head=head, matrix=matrix)


def sparsity_from_log_betas(lb: Array) -> float:
    """``1 - (2 / (T (T+1))) * sum_{i<=t} beta_i**(t-i)`` for one head."""
    lb = np.asarray(lb, dtype=np.float64)
    T = lb.shape[-1]
    total = float(prefix_decay_sums(lb).sum())
    return 1.0 - 2.0 * total / (T * (T + 1))


def sparsity_estimate(run) -> SparsityReport:
    """Per-(layer, head) sparsity of a recorded run."""
    n_layers, n_heads = _run_shape(run)
    rows = []
    for l in range(n_layers):
        for h in range(n_heads):
            rows.append((l, h, sparsity_from_log_betas(_head_log_betas(run, l, h))))
    return SparsityReport(rows=rows)


def deviation_vs_budget(run: RecordedRun, policies: list[str], budgets: list[int],
                        accuracy_fn=None) -> list[dict]:
    """Replay every (policy, budget) pair against the recorded full-attention
    streams; ``accuracy_fn(policy, budget)`` supplies the task-accuracy
    column when end-to-end evaluation is available."""
    rows = []
    for policy in policies:
        for budget in budgets:
            dev = replay_deviation(run, budget, policy)
            acc = float(accuracy_fn(policy, budget)) if accuracy_fn is not None else float("nan")
            rows.append({"policy": policy, "M": budget, "deviation": dev, "accuracy": acc})
    return rows


# ---------------------------------------------------------------------------
# canonical CSV forms


def _fmt(x) -> str:
    return repr(float(x))


def write_retention_csv(rmap: RetentionMap, path) -> None:
    T = rmap.matrix.shape[0]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,i,value\n")
        for t in range(T):
            for i in range(t + 1):
                fh.write(f"{t},{i},{_fmt(rmap.matrix[t, i])}\n")


def write_sparsity_csv(report: SparsityReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("layer,head,sparsity\n")
        for layer, head, value in report.rows:
            fh.write(f"{layer},{head},{_fmt(value)}\n")


def write_deviation_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("policy,M,deviation,accuracy\n")
        for r in rows:
            fh.write(f"{r['policy']},{r['M']},{_fmt(r['deviation'])},{_fmt(r['accuracy'])}\n")

"""Two-stage training plus its plumbing: AdamW, checkpoint I/O, the flat
config-file format, and JSON-lines loss logging.

Stage 1 pretrains the teacher (all weights, NTP only). Stage 2 freezes the
teacher, attaches retention gates, and optimizes distillation + NTP +
capacity over the gate parameters alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import model as M
from .errors import (
    ConfigError,
    DivergenceError,
    MagicMismatchError,
    ManifestError,
    NonFiniteGradError,
    TruncationError,
)
from .gates import GateParams
from .tasks import Dataset, TaskConfig, TaskSample

Array = np.ndarray

CHECKPOINT_MAGIC = b"TRIMKV01"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    stage: str = "teacher"
    lr: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 1
    grad_accum: int = 4
    steps: int = 100
    m_frac: float = 0.25
    m_abs: int | None = None
    lambda_cap: float = 1.0
    kl_direction: str = "forward"
    use_ntp: bool = True
    use_kl: bool = True
    use_cap: bool = True
    cap_reduction: str = "mean"
    seed: int = 0
    snapshot_interval: int = 50
    divergence_threshold: float = 1e4

    def __post_init__(self):
        if self.stage not in ("teacher", "gates"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.stage == "gates" and not (self.use_ntp or self.use_kl):
            raise ConfigError("gate stage needs at least one of use_ntp/use_kl")
        if self.kl_direction not in ("forward", "reverse"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.cap_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown cap_reduction {self.cap_reduction!r}")
        if self.lambda_cap < 0:
            raise ConfigError(f"lambda_cap must be >= 0, got {self.lambda_cap}")
        for name in ("batch_size", "grad_accum", "steps"):
            if getattr(self, name) < (0 if name == "steps" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def budget_for(self, seq_len: int) -> int:
        if self.m_abs is not None:
            return int(self.m_abs)
        return max(1, round(self.m_frac * seq_len))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        return d


_BOOL_KEYS = {"use_scale", "use_ntp", "use_kl", "use_cap"}
_INT_KEYS = {
    "n_layers", "n_heads", "n_kv_heads", "d_model", "d_head", "d_ff", "vocab_size",
    "max_seq", "gate_hidden", "batch_size", "grad_accum", "steps", "m_abs", "seed",
    "snapshot_interval", "n_pairs", "seq_len", "prefix_len", "gap_len", "n_train",
    "n_eval", "task_seed",
}
_FLOAT_KEYS = {
    "rope_theta", "lr", "weight_decay", "m_frac", "lambda_cap", "gate_bias_init",
    "divergence_threshold",
}
_STR_KEYS = {"activation", "gate_variant", "stage", "kl_direction", "cap_reduction", "task"}
_MODEL_KEYS = {
    "n_layers", "n_heads", "n_kv_heads", "d_model", "d_head", "d_ff", "vocab_size",
    "max_seq", "rope_theta", "use_scale", "activation", "gate_hidden", "gate_variant",
    "gate_bias_init",
}
_TRAIN_KEYS = {
    "stage", "lr", "weight_decay", "batch_size", "grad_accum", "steps", "m_frac",
    "m_abs", "lambda_cap", "kl_direction", "use_ntp", "use_kl", "use_cap",
    "cap_reduction", "seed", "snapshot_interval", "divergence_threshold",
}
_TASK_KEYS = {"task", "n_pairs", "seq_len", "vocab_size", "prefix_len", "gap_len",
              "n_train", "n_eval", "task_seed"}


def parse_config_file(path) -> dict[str, str]:
    """Flat UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        raw[key] = value
    return raw


def _coerce(key: str, value: str):
    if key in _BOOL_KEYS:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected boolean, got {value!r}")
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as e:
        raise ConfigError(f"key {key!r}: {e}") from None
    if key in _STR_KEYS:
        return value
    raise ConfigError(f"unknown config key {key!r}")


def resolve_configs(raw: dict[str, str], overrides: dict | None = None):
    """Typed (TrainConfig, ModelConfig, TaskConfig) from flat string keys.

    ``overrides`` already-typed values (e.g. CLI flags) win over file keys.
    """
    typed = {k: _coerce(k, v) for k, v in raw.items()}
    if overrides:
        typed.update({k: v for k, v in overrides.items() if v is not None})
    if "task" not in typed:
        raise ConfigError("missing required config key 'task'")
    model_kw = {k: typed[k] for k in typed if k in _MODEL_KEYS}
    train_kw = {k: typed[k] for k in typed if k in _TRAIN_KEYS}
    task_kw = {k: typed[k] for k in typed if k in _TASK_KEYS}
    if "task_seed" in task_kw:
        task_kw["seed"] = task_kw.pop("task_seed")
    if "vocab_size" in model_kw:
        task_kw.setdefault("vocab_size", model_kw["vocab_size"])
    return TrainConfig(**train_kw), M.ModelConfig(**model_kw), TaskConfig(**task_kw)


# ---------------------------------------------------------------------------
# optimizer


def init_adam_state(params: dict[str, Array]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: dict,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """Decoupled-weight-decay adaptive-moment update, in place.

    Rejects the whole step (no parameter is touched) with
    :class:`NonFiniteGradError` if any gradient contains NaN/Inf.
    """
    b1, b2 = betas
    for name in params:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteGradError(f"non-finite gradient for {name!r}; step rejected")
    state["t"] += 1
    t = state["t"]
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / corr1) / (np.sqrt(v / corr2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= np.asarray(lr * update, dtype=p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, config: dict, tensors: dict[str, Array]) -> None:
    """Binary checkpoint: 8-byte magic, u64-LE header length, JSON header
    (config + named tensor manifest), then little-endian float32 payload in
    manifest order. Round-trips float32 tensors bitwise.
    """
    names = sorted(tensors)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "manifest": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; raises typed errors on bad magic,
    truncated payloads, or manifest/shape mismatches."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {data[:8]!r}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise TruncationError(f"{path}: header extends past end of file")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: unreadable header: {e}") from e
    payload = data[16 + hlen :]
    tensors: dict[str, Array] = {}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        off, nbytes = entry["offset"], entry["nbytes"]
        if off + nbytes > len(payload):
            raise TruncationError(f"{path}: tensor {name!r} extends past end of payload")
        expected = int(np.prod(shape)) * 4 if shape else 4
        if nbytes != expected:
            raise ManifestError(
                f"{path}: tensor {name!r} shape {shape} implies {expected} bytes, manifest says {nbytes}"
            )
        tensors[name] = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(shape).copy()
    return header["config"], tensors


def gates_to_tensors(gates: list[GateParams]) -> dict[str, Array]:
    out: dict[str, Array] = {}
    for i, g in enumerate(gates):
        out.update(g.named(f"gates.{i}"))
    return out


def gates_from_tensors(cfg: M.ModelConfig, tensors: dict[str, Array]) -> list[GateParams]:
    gates = []
    for i in range(cfg.n_layers):
        w_in = tensors[f"gates.{i}.w_in"]
        w_out = tensors.get(f"gates.{i}.w_out")
        bias = tensors[f"gates.{i}.bias"]
        gates.append(
            GateParams(w_in=w_in, w_out=w_out, bias=bias,
                       activation=cfg.activation, variant=cfg.gate_variant)
        )
    return gates


def split_checkpoint_tensors(tensors: dict[str, Array]):
    base = {k: v for k, v in tensors.items() if not k.startswith("gates.")}
    gate = {k: v for k, v in tensors.items() if k.startswith("gates.")}
    return base, gate


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    final_report: L.LossReport | None
    eval_accuracy: float | None = None
    diverged: bool = False


def _stack_batch(samples: list[TaskSample]):
    lens = {len(s.tokens) for s in samples}
    if len(lens) != 1:
        raise ConfigError(f"batch requires equal-length samples, got lengths {sorted(lens)}")
    tokens = np.stack([s.tokens for s in samples])
    mask = np.stack([s.loss_mask for s in samples])
    return tokens, mask


def _masked_ntp_rows(logits: Array, tokens: Array, mask: Array):
    """Rows of logits predicting masked target tokens: the loss at target
    position i reads logits[i-1]. Returns (rows, targets, (b_idx, p_idx))."""
    b_idx, t_idx = np.nonzero(mask & (np.arange(mask.shape[1]) >= 1))
    p_idx = t_idx - 1
    return logits[b_idx, p_idx], tokens[b_idx, t_idx], (b_idx, p_idx)


def _sample_stream(n_samples: int, per_step: int, steps: int, rng: np.random.Generator):
    """Deterministic shuffled index stream covering `steps * per_step` draws."""
    order = rng.permutation(n_samples)
    pos = 0
    for _ in range(steps):
        batch = []
        for _ in range(per_step):
            if pos == len(order):
                order = rng.permutation(n_samples)
                pos = 0
            batch.append(int(order[pos]))
            pos += 1
        yield batch


def eval_accuracy(weights: dict[str, Array], cfg: M.ModelConfig, samples: list[TaskSample],
                  batch_size: int = 32) -> float:
    """Full-attention answer accuracy: argmax over every answer-span token."""
    correct = 0
    total = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        tokens, _ = _stack_batch(chunk)
        span_mask = np.zeros(tokens.shape, dtype=bool)
        for b, s in enumerate(chunk):
            span_mask[b, s.answer_span[0] : s.answer_span[1]] = True
        logits = M.forward_teacher(tokens, cfg, weights).logits
        rows, targets, _ = _masked_ntp_rows(logits, tokens, span_mask)
        correct += int((rows.argmax(axis=-1) == targets).sum())
        total += len(targets)
    return correct / max(total, 1)


def _write_manifest_line(fh, report: L.LossReport, step: int):
    fh.write(json.dumps(report.to_log_dict(step)) + "\n")


def train_teacher(train_cfg: TrainConfig, model_cfg: M.ModelConfig, dataset: Dataset,
                  out_dir) -> TrainResult:
    """Stage 1: NTP-only pretraining of every base weight."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(train_cfg.seed)
    weights = M.init_weights(model_cfg, rng)
    opt = init_adam_state(weights)
    ckpt_path = out_dir / "checkpoint.trimkv"
    log_path = out_dir / "train_log.jsonl"
    config_blob = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "stage": "teacher",
    }
    last_good = {k: v.copy() for k, v in weights.items()}
    report = None
    diverged = False
    per_step = train_cfg.batch_size * train_cfg.grad_accum
    stream = _sample_stream(len(dataset.train), per_step, train_cfg.steps, rng)

    with open(log_path, "w", encoding="utf-8") as log:
        for step, idxs in enumerate(stream, start=1):
            grads: dict[str, Array] = {}
            ntp_total = 0.0
            for a in range(train_cfg.grad_accum):
                chunk = [dataset.train[i] for i in
                         idxs[a * train_cfg.batch_size : (a + 1) * train_cfg.batch_size]]
                tokens, mask = _stack_batch(chunk)
                out, tape = M.forward_teacher(tokens, model_cfg, weights, want_tape=True)
                rows, targets, (b_idx, p_idx) = _masked_ntp_rows(out.logits, tokens, mask)
                ntp_total += L.ntp_loss(rows, targets)
                grad_rows = L.ntp_loss_grad(rows, targets)
                grad_logits = np.zeros_like(out.logits)
                grad_logits[b_idx, p_idx] = grad_rows.astype(grad_logits.dtype)
                base, _ = M.backward(tape, grad_logits, model_cfg, weights)
                for k, v in base.items():
                    grads[k] = grads.get(k, 0.0) + v
            for k in grads:
                grads[k] = grads[k] / train_cfg.grad_accum
            ntp = ntp_total / train_cfg.grad_accum
            report = L.total_objective(0.0, ntp, 0.0, 0.0)
            _write_manifest_line(log, report, step)
            if report.total > train_cfg.divergence_threshold or not np.isfinite(report.total):
                diverged = True
                break
            try:
                adam_step(weights, grads, opt, train_cfg.lr, train_cfg.weight_decay)
            except NonFiniteGradError as e:
                log.write(json.dumps({"step": step, "skipped": str(e)}) + "\n")
                continue
            last_good = {k: v.copy() for k, v in weights.items()}

    save_checkpoint(ckpt_path, config_blob, last_good if diverged else weights)
    result = TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        steps_run=train_cfg.steps,
        final_report=report,
        eval_accuracy=eval_accuracy(weights, model_cfg, dataset.eval) if dataset.eval else None,
        diverged=diverged,
    )
    if diverged:
        raise DivergenceError(
            f"teacher training diverged (loss {report.total:.3g}); "
            f"last good checkpoint at {ckpt_path}"
        )
    return result


def _capacity_terms(retention, budget: int, train_cfg: TrainConfig):
    """Mean (or sum) capacity loss across layers/heads plus per-layer
    log-beta gradients scaled for the chosen reduction."""
    vals = []
    grads = []
    n_terms = 0
    for scores in retention:
        lb = scores.log_betas.transpose(0, 2, 1)  # (B, Hk, T)
        vals.append(L.capacity_loss(lb, budget))
        grads.append(L.capacity_loss_grad(lb, budget).transpose(0, 2, 1))
        n_terms += lb.shape[0] * lb.shape[1]
    total = float(sum(v.sum() for v in vals))
    if train_cfg.cap_reduction == "mean":
        scale = 1.0 / n_terms
    else:
        scale = 1.0 / retention[0].log_betas.shape[0]  # sum over heads, mean over batch
    return total * scale, [g * scale for g in grads]


def train_gates(train_cfg: TrainConfig, dataset: Dataset, teacher_ckpt, out_dir,
                model_cfg: M.ModelConfig | None = None) -> TrainResult:
    """Stage 2: freeze the teacher, train retention gates on the combined
    objective. Emits a JSON-lines loss log and periodic log-beta snapshots.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_config, tensors = load_checkpoint(teacher_ckpt)
    base_weights, _ = split_checkpoint_tensors(tensors)
    if model_cfg is None:
        model_cfg = M.ModelConfig.from_dict(ckpt_config["model"])
    frozen_before = {k: v.copy() for k, v in base_weights.items()}

    rng = np.random.default_rng(train_cfg.seed)
    gates = M.init_gates(model_cfg, rng)
    gate_params: dict[str, Array] = {}
    for i, g in enumerate(gates):
        gate_params.update(g.named(f"gates.{i}"))
    opt = init_adam_state(gate_params)

    seq_len = dataset.seq_len
    budget = train_cfg.budget_for(seq_len)
    lam = train_cfg.lambda_cap if train_cfg.use_cap else 0.0
    ckpt_path = out_dir / "checkpoint.trimkv"
    log_path = out_dir / "train_log.jsonl"
    snap_dir = out_dir / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    report = None
    diverged = False
    per_step = train_cfg.batch_size * train_cfg.grad_accum
    stream = _sample_stream(len(dataset.train), per_step, train_cfg.steps, rng)
    last_good_gates = {k: v.copy() for k, v in gates_to_tensors(gates).items()}

    with open(log_path, "w", encoding="utf-8") as log:
        for step, idxs in enumerate(stream, start=1):
            grads: dict[str, Array] = {k: np.zeros_like(v) for k, v in gate_params.items()}
            kl_total = ntp_total = cap_total = 0.0
            snapshot_lb: list[list[Array]] | None = (
                [[] for _ in range(model_cfg.n_layers)]
                if train_cfg.snapshot_interval and step % train_cfg.snapshot_interval == 0
                else None
            )
            for a in range(train_cfg.grad_accum):
                chunk = [dataset.train[i] for i in
                         idxs[a * train_cfg.batch_size : (a + 1) * train_cfg.batch_size]]
                tokens, mask = _stack_batch(chunk)
                teacher_logits = M.forward_teacher(tokens, model_cfg, base_weights).logits
                out, tape = M.forward_student(tokens, model_cfg, base_weights, gates,
                                              want_tape=True)
                grad_logits = np.zeros_like(out.logits)
                if train_cfg.use_kl:
                    kl_total += L.kl_distill(teacher_logits, out.logits, train_cfg.kl_direction)
                    grad_logits += L.kl_distill_grad(teacher_logits, out.logits,
                                                     train_cfg.kl_direction).astype(grad_logits.dtype)
                if train_cfg.use_ntp:
                    rows, targets, (b_idx, p_idx) = _masked_ntp_rows(out.logits, tokens, mask)
                    ntp_total += L.ntp_loss(rows, targets)
                    grad_logits[b_idx, p_idx] += L.ntp_loss_grad(rows, targets).astype(grad_logits.dtype)
                cap_val, cap_grads = _capacity_terms(out.retention, budget, train_cfg)
                cap_total += cap_val
                extra = (
                    [(g * lam).astype(grad_logits.dtype) for g in cap_grads]
                    if lam > 0 else None
                )
                _, gate_grads = M.backward(
                    tape, grad_logits, model_cfg, base_weights, gates=gates,
                    grad_log_betas_extra=extra, want_base_grads=False,
                )
                for i, gg in enumerate(gate_grads):
                    for attr, val in gg.items():
                        grads[f"gates.{i}.{attr}"] += val
                if snapshot_lb is not None:
                    for i, scores in enumerate(out.retention):
                        snapshot_lb[i].append(scores.log_betas)
            for k in grads:
                grads[k] = grads[k] / train_cfg.grad_accum
            report = L.total_objective(
                kl_total / train_cfg.grad_accum,
                ntp_total / train_cfg.grad_accum,
                cap_total / train_cfg.grad_accum,
                lam,
            )
            _write_manifest_line(log, report, step)
            if snapshot_lb is not None:
                np.savez(
                    snap_dir / f"step_{step:06d}.npz",
                    step=step,
                    budget=budget,
                    cap=report.l_cap,
                    cap_reduction=train_cfg.cap_reduction,
                    **{f"log_betas_{i}": np.concatenate(parts, axis=0)
                       for i, parts in enumerate(snapshot_lb)},
                )
            if report.total > train_cfg.divergence_threshold or not np.isfinite(report.total):
                diverged = True
                break
            try:
                adam_step(gate_params, grads, opt, train_cfg.lr, train_cfg.weight_decay)
            except NonFiniteGradError as e:
                log.write(json.dumps({"step": step, "skipped": str(e)}) + "\n")
                continue
            last_good_gates = {k: v.copy() for k, v in gates_to_tensors(gates).items()}

    drift = max(
        float(np.max(np.abs(base_weights[k] - frozen_before[k]))) for k in base_weights
    )
    if drift != 0.0:
        raise RuntimeError(f"frozen base weights drifted by {drift}")

    config_blob = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "stage": "gates",
        "budget": budget,
    }
    gate_tensors = last_good_gates if diverged else gates_to_tensors(gates)
    save_checkpoint(ckpt_path, config_blob, {**base_weights, **gate_tensors})
    result = TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        steps_run=train_cfg.steps,
        final_report=report,
        diverged=diverged,
    )
    if diverged:
        raise DivergenceError(
            f"gate training diverged (loss {report.total:.3g}); checkpoint at {ckpt_path}"
        )
    return result


def load_model_from_checkpoint(path):
    """(model_cfg, base_weights, gates_or_None, config_blob) from a file."""
    config, tensors = load_checkpoint(path)
    cfg = M.ModelConfig.from_dict(config["model"])
    base, gate_tensors = split_checkpoint_tensors(tensors)
    gates = gates_from_tensors(cfg, gate_tensors) if gate_tensors else None
    return cfg, base, gates, config

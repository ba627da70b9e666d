"""Command-line entry point: training, evaluation sweeps, exports, and the
decode-throughput benchmark.

Exit codes are stable API: 0 ok, 1 I/O failure, 2 config/usage error,
3 numeric divergence. ``TRIMKV_THREADS`` caps BLAS parallelism (0 = auto);
it must be applied before numpy loads, so heavy imports happen inside
``main``.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("TRIMKV_THREADS")
    if cap and cap != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    resolved_config: dict, started: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": getattr(args, "config", None),
        "config": resolved_config,
        "seed": getattr(args, "seed", None),
        "out_dir": str(out_dir),
        "git_describe": _git_describe(),
        "started_at": started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")


def _parse_task_spec(spec: str):
    """``name[,key=value...]`` or a path to a config file."""
    from .errors import ConfigError
    from .tasks import TaskConfig
    from .train import parse_config_file, resolve_configs

    if Path(spec).is_file():
        _, _, task_cfg = resolve_configs(parse_config_file(spec))
        return task_cfg
    name, _, rest = spec.partition(",")
    kw: dict = {"task": name, "n_train": 0}
    for part in filter(None, rest.split(",")):
        if "=" not in part:
            raise ConfigError(f"task spec entry {part!r} is not key=value")
        key, value = part.split("=", 1)
        kw[key.strip()] = int(value)
    try:
        return TaskConfig(**kw)
    except TypeError as e:
        raise ConfigError(f"bad task spec {spec!r}: {e}") from None


def _resolved_from_args(args, stage: str):
    from .train import parse_config_file, resolve_configs

    raw = parse_config_file(args.config)
    overrides = {"stage": stage}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    train_cfg, model_cfg, task_cfg = resolve_configs(raw, overrides)
    return raw, train_cfg, model_cfg, task_cfg


def cmd_train_teacher(args) -> int:
    from .tasks import build_dataset
    from .train import train_teacher

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    raw, train_cfg, model_cfg, task_cfg = _resolved_from_args(args, "teacher")
    dataset = build_dataset(task_cfg)
    out_dir = Path(args.out)
    result = train_teacher(train_cfg, model_cfg, dataset, out_dir)
    _write_manifest(out_dir, "train-teacher", args,
                    {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(),
                     "task": task_cfg.__dict__}, started)
    if result.eval_accuracy is not None:
        print(f"held-out accuracy: {result.eval_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_train_gates(args) -> int:
    from .errors import ConfigError
    from .tasks import build_dataset
    from .train import train_gates

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    raw, train_cfg, model_cfg, task_cfg = _resolved_from_args(args, "gates")
    teacher = args.teacher or raw.get("teacher_ckpt")
    if not teacher:
        raise ConfigError("missing required config key 'teacher_ckpt' (or --teacher)")
    dataset = build_dataset(task_cfg)
    out_dir = Path(args.out)
    result = train_gates(train_cfg, dataset, teacher, out_dir)
    _write_manifest(out_dir, "train-gates", args,
                    {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(),
                     "task": task_cfg.__dict__, "teacher_ckpt": str(teacher)}, started)
    print(f"final loss: {result.final_report.total:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def evaluate_checkpoint(ckpt, task_cfg, policies: list[str], budgets: list[int],
                        chunk_size: int | None = None, with_deviation: bool = True):
    """Accuracy (bounded end-to-end decode) and mean attention deviation
    (full-run replay) per (policy, budget). Returns (rows, full_accuracy)."""
    import numpy as np

    from .cache import DecodeEngine, record_run, replay_deviation
    from .errors import ConfigError
    from .tasks import build_dataset
    from .train import load_model_from_checkpoint

    cfg, weights, gates, _ = load_model_from_checkpoint(ckpt)
    if any(p.startswith("trimkv") for p in policies) and gates is None:
        raise ConfigError("policy 'trimkv' needs a checkpoint with retention gates")
    samples = build_dataset(task_cfg).eval

    def bounded_accuracy(policy: str, budget: int) -> float:
        correct = 0
        for s in samples:
            eng = DecodeEngine(cfg, weights, gates, budget=budget, policy=policy)
            logits = eng.prefill(s.tokens[:-1], chunk_size=chunk_size)
            correct += int(np.argmax(logits) == s.tokens[-1])
        return correct / len(samples)

    full_correct = 0
    runs = []
    for s in samples:
        eng = DecodeEngine(cfg, weights, gates, budget=None)
        logits = eng.prefill(s.tokens[:-1], chunk_size=chunk_size)
        full_correct += int(np.argmax(logits) == s.tokens[-1])
        if with_deviation:
            runs.append(record_run(s.tokens[:-1], cfg, weights, gates))
    full_accuracy = full_correct / len(samples)

    rows = []
    for policy in policies:
        for budget in budgets:
            acc = bounded_accuracy(policy, budget)
            if with_deviation:
                dev = float(np.mean([replay_deviation(r, budget, policy) for r in runs]))
            else:
                dev = float("nan")
            rows.append({"policy": policy, "M": budget, "deviation": dev, "accuracy": acc})
    return rows, full_accuracy


def cmd_evaluate(args) -> int:
    from .analysis import (
        build_retention_map,
        sparsity_estimate,
        write_deviation_csv,
        write_retention_csv,
        write_sparsity_csv,
    )
    from .cache import DecodeEngine, save_trace_bits, write_trace_csv
    from .tasks import build_dataset
    from .train import load_model_from_checkpoint

    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    task_cfg = _parse_task_spec(args.task)
    policies = args.policy.split(",")
    budgets = [int(b) for b in str(args.budget).split(",")]
    rows, full_acc = evaluate_checkpoint(args.ckpt, task_cfg, policies, budgets,
                                         chunk_size=args.chunk)
    n_steps = task_cfg.seq_len - 1
    print(f"full-cache accuracy: {full_acc:.4f}")
    for r in rows:
        print(f"policy={r['policy']} M={r['M']} accuracy={r['accuracy']:.4f} "
              f"mean_deviation={r['deviation'] / n_steps:.6f}")

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_deviation_csv(rows, out_dir / "deviation.csv")
        if args.trace:
            import numpy as np

            cfg, weights, gates, _ = load_model_from_checkpoint(args.ckpt)
            sample = build_dataset(task_cfg).eval[0]
            eng = DecodeEngine(cfg, weights, gates, budget=budgets[0],
                               policy=policies[0], record_trace=True)
            eng.prefill(sample.tokens[:-1], chunk_size=args.chunk)
            save_trace_bits(eng.trace, out_dir / "trace.bits")
            np.savez(out_dir / "run_record.npz",
                     tokens=sample.tokens[:-1],
                     **{f"log_betas_{l}_{h}": np.asarray(eng.log_beta_history[l][h])
                        for l in range(cfg.n_layers) for h in range(cfg.n_kv_heads)})
            for l in range(cfg.n_layers):
                for h in range(cfg.n_kv_heads):
                    write_trace_csv(eng.trace, l, h, out_dir / f"trace_L{l}H{h}.csv")
                    write_retention_csv(build_retention_map(eng, l, h),
                                        out_dir / f"retention_L{l}H{h}.csv")
            write_sparsity_csv(sparsity_estimate(eng), out_dir / "sparsity.csv")
        _write_manifest(out_dir, "evaluate", args,
                        {"task": task_cfg.__dict__, "policies": policies,
                         "budgets": budgets}, started)
    return 0


def run_bench(ckpt, context: int, gen: int, budget: int, batch: int = 1,
              reps: int = 3, policy: str = "trimkv", seed: int = 0):
    """Timing comparison of full-cache vs bounded-cache decoding on one set
    of weights. Per rep: prefill ``context`` random tokens, then time every
    one of ``gen`` decode steps. Returns medians across reps (warmup rep
    excluded) plus per-step medians for flatness analysis."""
    import numpy as np

    from .cache import DecodeEngine
    from .train import load_model_from_checkpoint

    cfg, weights, gates, _ = load_model_from_checkpoint(ckpt)
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, cfg.vocab_size, size=max(context, 1))
    stream = rng.integers(0, cfg.vocab_size, size=gen)

    def one_rep(bounded: bool):
        times = np.empty((batch, gen))
        for b in range(batch):
            eng = DecodeEngine(cfg, weights, gates,
                               budget=budget if bounded else None, policy=policy)
            eng.prefill(prompt)
            for i, tok in enumerate(stream):
                t0 = time.perf_counter()
                eng.step(int(tok))
                times[b, i] = time.perf_counter() - t0
        return times

    results = {}
    for name, bounded in (("full", False), ("bounded", True)):
        reps_times = [one_rep(bounded) for _ in range(reps + 1)][1:]  # drop warmup
        total = float(np.median([t.sum() for t in reps_times]))
        per_step = np.median(np.stack(reps_times), axis=(0, 1))  # (gen,)
        results[name] = {
            "decode_seconds": total,
            "tokens_per_second": batch * gen / total,
            "per_step_median": per_step,
        }
    return results


def cmd_bench(args) -> int:
    results = run_bench(args.ckpt, args.context, args.gen, args.budget,
                        batch=args.batch, reps=args.reps, seed=args.seed or 0)
    for name in ("full", "bounded"):
        r = results[name]
        print(f"{name}: {r['tokens_per_second']:.1f} tok/s, "
              f"{r['decode_seconds']:.3f} s decode")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            name: {
                "decode_seconds": r["decode_seconds"],
                "tokens_per_second": r["tokens_per_second"],
                "per_step_median_ms": [x * 1e3 for x in r["per_step_median"]],
            }
            for name, r in results.items()
        }
        (out / "bench.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_export(args) -> int:
    import numpy as np

    from .analysis import RetentionMap, write_retention_csv, write_sparsity_csv
    from .analysis import sparsity_from_log_betas
    from .cache import load_trace_bits, write_trace_csv
    from .errors import ConfigError

    run_dir = Path(args.run)
    record = run_dir / "run_record.npz"
    trace_bits = run_dir / "trace.bits"
    what = args.what

    if what in ("retention", "sparsity") and not record.exists():
        raise ConfigError(f"{run_dir} has no run_record.npz; rerun evaluate with --trace")
    if what == "trace" and not trace_bits.exists():
        raise ConfigError(f"{run_dir} has no trace.bits; rerun evaluate with --trace")
    if what == "deviation" and not (run_dir / "deviation.csv").exists():
        raise ConfigError(f"{run_dir} has no deviation.csv; rerun evaluate with --out")

    out_dir = Path(args.out) if args.out else run_dir / "exports"
    out_dir.mkdir(parents=True, exist_ok=True)

    if what == "trace":
        trace = load_trace_bits(trace_bits)
        for layer, head in sorted(trace.rows):
            write_trace_csv(trace, layer, head, out_dir / f"trace_L{layer}H{head}.csv")
    elif what in ("retention", "sparsity"):
        data = np.load(record)
        heads = sorted(
            tuple(map(int, key.split("_")[2:4]))
            for key in data.files if key.startswith("log_betas_")
        )
        if what == "retention":
            from .analysis import RETENTION_T_GUARD
            from .errors import SizeGuardError

            for layer, head in heads:
                lb = data[f"log_betas_{layer}_{head}"]
                T = len(lb)
                if T > RETENTION_T_GUARD:
                    raise SizeGuardError(f"T={T} exceeds retention export guard")
                gaps = np.arange(T)[:, None] - np.arange(T)[None, :]
                with np.errstate(under="ignore"):
                    matrix = np.where(gaps >= 0, np.exp(np.maximum(gaps, 0) * lb[None, :]), 0.0)
                write_retention_csv(RetentionMap(layer, head, matrix),
                                    out_dir / f"retention_L{layer}H{head}.csv")
        else:
            from .analysis import SparsityReport

            rows = [(layer, head, sparsity_from_log_betas(data[f"log_betas_{layer}_{head}"]))
                    for layer, head in heads]
            write_sparsity_csv(SparsityReport(rows=rows), out_dir / "sparsity.csv")
    elif what == "deviation":
        (out_dir / "deviation.csv").write_bytes((run_dir / "deviation.csv").read_bytes())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trimkv",
        description="Retention-gated KV-cache eviction engine (desk scale).",
        epilog="exit codes: 0 ok, 1 I/O, 2 config/usage, 3 divergence",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="stage 1: pretrain the frozen base model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-gates", help="stage 2: train retention gates")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--teacher", help="teacher checkpoint (overrides config key)")
    p.set_defaults(func=cmd_train_gates)

    p = sub.add_parser("evaluate", help="accuracy/deviation under a budget")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, help="task spec: name[,k=v...] or config path")
    p.add_argument("--policy", required=True, help="comma-separated policy specs")
    p.add_argument("--budget", required=True, help="comma-separated budgets")
    p.add_argument("--chunk", type=int, default=None, help="prefill chunk size (default 1 token at a time)")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate, chunk=1)

    p = sub.add_parser("bench", help="decode throughput: full vs bounded cache")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--gen", type=int, required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="re-emit CSV artifacts from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--what", required=True,
                   choices=["retention", "trace", "sparsity", "deviation"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import CheckpointError, ConfigError, DivergenceError, SizeGuardError

    try:
        return args.func(args)
    except (ConfigError, SizeGuardError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()

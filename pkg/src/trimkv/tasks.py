"""Synthetic long-memory corpora and plain-text ingestion.

The associative-recall generator places key/value pairs early and the query
late so that a bounded cache must retain the early facts to answer. Keys,
values, and filler draw from disjoint vocabulary ranges, which keeps
retention heatmaps legible (fact tokens vs. filler tokens).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EncodingError, GenerationError


@dataclass
class TaskSample:
    tokens: np.ndarray
    loss_mask: np.ndarray  # True where the token is a prediction target
    answer_span: tuple[int, int]  # [start, end) indices into tokens

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        s, e = self.answer_span
        if not (0 <= s < e <= len(self.tokens)):
            raise GenerationError(f"answer_span {self.answer_span} out of bounds")
        if self.loss_mask.shape != self.tokens.shape:
            raise GenerationError("loss_mask length must match tokens")


@dataclass
class TaskConfig:
    task: str = "associative_recall"
    n_pairs: int = 4
    seq_len: int = 64
    vocab_size: int = 64
    prefix_len: int = 8
    gap_len: int = 16
    n_train: int = 2048
    n_eval: int = 256
    seed: int = 1234


def recall_vocab_ranges(vocab: int):
    """(keys, values, filler) ranges as (start, stop) pairs over a vocab."""
    n_keys = vocab // 3
    if n_keys < 1 or vocab - 2 * n_keys < 1:
        raise GenerationError(f"vocab {vocab} too small for key/value/filler ranges")
    return (0, n_keys), (n_keys, 2 * n_keys), (2 * n_keys, vocab)


def gen_associative_recall(n_pairs: int, seq_len: int, vocab: int, seed: int) -> TaskSample:
    """``k1 v1 ... kn vn [filler] k_j`` with the answer ``v_j`` as the final
    token; loss and answer span cover only that final token.
    """
    if 2 * n_pairs + 2 > seq_len:
        raise GenerationError(
            f"need seq_len >= {2 * n_pairs + 2} for {n_pairs} pairs, got {seq_len}"
        )
    (k0, k1), (v0, _v1), (f0, f1) = recall_vocab_ranges(vocab)
    if n_pairs > k1 - k0:
        raise GenerationError(f"vocab supports {k1 - k0} distinct keys, need {n_pairs}")
    rng = np.random.default_rng(seed)
    keys = k0 + rng.choice(k1 - k0, size=n_pairs, replace=False)
    values = v0 + rng.integers(0, k1 - k0, size=n_pairs)
    j = int(rng.integers(0, n_pairs))
    n_filler = seq_len - 2 * n_pairs - 2
    filler = rng.integers(f0, f1, size=n_filler)

    tokens = np.empty(seq_len, dtype=np.int64)
    tokens[0 : 2 * n_pairs : 2] = keys
    tokens[1 : 2 * n_pairs : 2] = values
    tokens[2 * n_pairs : 2 * n_pairs + n_filler] = filler
    tokens[-2] = keys[j]
    tokens[-1] = values[j]

    loss_mask = np.zeros(seq_len, dtype=bool)
    loss_mask[-1] = True
    return TaskSample(tokens=tokens, loss_mask=loss_mask, answer_span=(seq_len - 1, seq_len))


def gen_copy_task(prefix_len: int, gap_len: int, seed: int, vocab: int = 64) -> TaskSample:
    """``[marker] payload [gap filler] [marker] payload``; loss on the second
    payload only."""
    if prefix_len < 1 or gap_len < 0:
        raise GenerationError("prefix_len must be >= 1 and gap_len >= 0")
    if vocab < 8:
        raise GenerationError(f"vocab {vocab} too small for a copy task")
    marker = 0
    pay_lo, pay_hi = 1, vocab // 2
    fill_lo, fill_hi = vocab // 2, vocab
    rng = np.random.default_rng(seed)
    payload = rng.integers(pay_lo, pay_hi, size=prefix_len)
    filler = rng.integers(fill_lo, fill_hi, size=gap_len)
    tokens = np.concatenate([[marker], payload, filler, [marker], payload])
    loss_mask = np.zeros(len(tokens), dtype=bool)
    start = 1 + prefix_len + gap_len + 1
    loss_mask[start:] = True
    return TaskSample(tokens=tokens, loss_mask=loss_mask, answer_span=(start, len(tokens)))


def ingest_text(path, mode: str = "char"):
    """Tokenize a file as bytes or unicode characters.

    Ids are assigned by sorting the set of distinct symbols, so the mapping
    is stable under reordering of the input. Returns ``(ids, vocab)`` where
    ``vocab`` is the id -> symbol table.
    """
    raw = Path(path).read_bytes()
    if mode == "byte":
        symbols = list(raw)
    elif mode == "char":
        try:
            symbols = list(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise EncodingError(f"invalid UTF-8 at byte offset {e.start}") from e
    else:
        raise ConfigError(f"unknown ingest mode {mode!r}")
    vocab = sorted(set(symbols))
    index = {s: i for i, s in enumerate(vocab)}
    ids = np.array([index[s] for s in symbols], dtype=np.int64)
    return ids, vocab


def detokenize(ids, vocab, mode: str = "char"):
    if mode == "byte":
        return bytes(vocab[i] for i in ids)
    return "".join(vocab[i] for i in ids)


@dataclass
class Dataset:
    train: list[TaskSample]
    eval: list[TaskSample]
    meta: dict = field(default_factory=dict)

    @property
    def seq_len(self) -> int:
        return len(self.train[0].tokens)


_EVAL_SEED_OFFSET = 1_000_000


def build_dataset(cfg: TaskConfig) -> Dataset:
    """Deterministic train/eval split: eval samples draw from a disjoint
    seed range so held-out queries are unseen."""
    if cfg.task == "associative_recall":
        gen = lambda s: gen_associative_recall(cfg.n_pairs, cfg.seq_len, cfg.vocab_size, s)
    elif cfg.task == "copy":
        gen = lambda s: gen_copy_task(cfg.prefix_len, cfg.gap_len, s, vocab=cfg.vocab_size)
    else:
        raise ConfigError(f"unknown task {cfg.task!r}")
    train = [gen(cfg.seed + i) for i in range(cfg.n_train)]
    evals = [gen(cfg.seed + _EVAL_SEED_OFFSET + i) for i in range(cfg.n_eval)]
    return Dataset(train=train, eval=evals, meta={"task": cfg.task})


def save_samples(path, samples: list[TaskSample]) -> None:
    """One JSON object per line: {tokens, loss_mask, answer_span}."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "tokens": s.tokens.tolist(),
                        "loss_mask": s.loss_mask.astype(int).tolist(),
                        "answer_span": list(s.answer_span),
                    }
                )
            )
            fh.write("\n")


def load_samples(path) -> list[TaskSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                TaskSample(
                    tokens=np.array(d["tokens"], dtype=np.int64),
                    loss_mask=np.array(d["loss_mask"], dtype=bool),
                    answer_span=tuple(d["answer_span"]),
                )
            )
    return out

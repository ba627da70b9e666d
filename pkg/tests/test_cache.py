import math

import numpy as np
import pytest

from trimkv.cache import (
    CacheEntry,
    DecodeEngine,
    EvictionTrace,
    H2OPolicy,
    RandomPolicy,
    RecencyWindowPolicy,
    SinkWindowPolicy,
    TrimKVPolicy,
    chunked_prefill,
    decode_step,
    evict,
    head_deviation,
    load_trace_bits,
    oracle_optimal_eviction,
    parse_policy,
    record_run,
    replay_deviation,
    save_trace_bits,
    write_trace_csv,
)
from trimkv.errors import ConfigError, SizeGuardError, StateError
from trimkv.model import ModelConfig, forward_teacher, init_gates, init_weights

TINY = ModelConfig(n_layers=2, n_heads=2, n_kv_heads=2, d_model=8, d_head=4,
                   d_ff=8, vocab_size=16, max_seq=512, gate_hidden=4)


def entry(position, log_beta=-0.1, acc=0.0, d=2):
    return CacheEntry(key=np.zeros(d), value=np.zeros(d), log_beta=log_beta,
                      position=position, acc=acc)


@pytest.fixture(scope="module")
def tiny_model():
    rng = np.random.default_rng(0)
    weights = init_weights(TINY, rng)
    gates = init_gates(TINY, rng)
    return weights, gates


# ------------------------------------------------------------------ policies

def test_trimkv_evicts_lowest_decayed_score():
    # positions 1..4 (1-indexed in the walkthrough), betas 0.9/0.1/0.8/new
    entries = [
        entry(0, math.log(0.9)),
        entry(1, math.log(0.1)),
        entry(2, math.log(0.8)),
        entry(3, math.log(0.99)),
    ]
    evicted = evict(entries, 3, t=3, policy=TrimKVPolicy())
    assert evicted == [1]


def test_trimkv_never_picks_newest():
    entries = [entry(0, -0.5), entry(1, -1e-12)]
    assert TrimKVPolicy().choose(entries, t=1, budget=1) == 0


def test_trimkv_tie_breaks_toward_oldest():
    # equal decayed scores: (4-2)*-0.2 == (4-0)*-0.1
    entries = [entry(0, -0.1), entry(2, -0.2), entry(4, -0.3)]
    assert TrimKVPolicy().choose(entries, t=4, budget=2) == 0


def test_trimkv_hand_score_comparison():
    # gaps 2,1: 2*ln0.5 < ln0.9 so the older position goes
    entries = [entry(0, math.log(0.5)), entry(1, math.log(0.9)), entry(2, -1e-9)]
    evicted = evict(entries, 2, t=2, policy=TrimKVPolicy())
    assert evicted == [0]


def test_recency_window_evicts_oldest():
    entries = [entry(3), entry(5), entry(9)]
    assert RecencyWindowPolicy().choose(entries, 9, 2) == 0


def test_sink_window_protects_sinks():
    # sinks=1: position 0 protected; oldest non-sink goes
    entries = [entry(0), entry(1), entry(2), entry(3)]
    evicted = evict(entries, 3, t=3, policy=SinkWindowPolicy(sinks=1))
    assert evicted == [1]


def test_sink_window_rejects_sinks_at_or_above_budget():
    entries = [entry(i) for i in range(5)]
    with pytest.raises(ConfigError):
        evict(entries, 3, t=4, policy=SinkWindowPolicy(sinks=3))


def test_h2o_evicts_zero_mass_entry():
    entries = [entry(0, acc=1.0), entry(1, acc=0.0), entry(2, acc=3.0), entry(3, acc=2.0)]
    evicted = evict(entries, 3, t=3, policy=H2OPolicy(window=1))
    assert evicted == [1]


def test_random_policy_is_seeded_and_spares_newest():
    entries = [entry(i) for i in range(6)]
    picks_a = [RandomPolicy(seed=5).choose(list(entries), 5, 4) for _ in range(1)]
    picks_b = [RandomPolicy(seed=5).choose(list(entries), 5, 4) for _ in range(1)]
    assert picks_a == picks_b
    for s in range(30):
        assert RandomPolicy(seed=s).choose(entries, 5, 4) < len(entries) - 1


def test_parse_policy_specs():
    assert isinstance(parse_policy("trimkv")(), TrimKVPolicy)
    assert parse_policy("sink_window:2")().sinks == 2
    assert parse_policy("h2o:5")().window == 5
    with pytest.raises(ConfigError):
        parse_policy("nope")


def test_evict_errors():
    with pytest.raises(StateError):
        evict([], 2, 0, TrimKVPolicy())
    with pytest.raises(ConfigError):
        evict([entry(0)], 0, 0, TrimKVPolicy())


def test_policy_invariants_over_random_streams():
    specs = ["trimkv", "recency_window", "sink_window:2", "h2o", "random:3"]
    M = 8
    for spec in specs:
        policy = parse_policy(spec)()
        rng = np.random.default_rng(hash(spec) % 2**32)
        entries = []
        trace = EvictionTrace()
        for t in range(400):
            entries.append(entry(t, log_beta=-float(rng.uniform(1e-6, 2.0))))
            for e in entries:
                e.acc += float(rng.uniform(0, 1))
            if len(entries) > M:
                evict(entries, M, t, policy)
            assert len(entries) <= M
            assert entries[-1].position == t  # newest survives
            positions = [e.position for e in entries]
            assert positions == sorted(positions)
            trace.add(0, 0, t, positions)
        assert trace.is_monotone()


# ------------------------------------------------------------------ engine

def test_engine_no_eviction_matches_full_cache_exactly(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(1).integers(0, TINY.vocab_size, size=10)
    bounded = DecodeEngine(TINY, weights, gates, budget=64, policy="trimkv")
    full = DecodeEngine(TINY, weights, gates, budget=None)
    for tok in tokens:
        a = bounded.step(int(tok))
        b = full.step(int(tok))
        assert np.array_equal(a, b)


def test_engine_capacity_held_every_step(tiny_model):
    weights, gates = tiny_model
    rng = np.random.default_rng(2)
    eng = DecodeEngine(TINY, weights, gates, budget=6, policy="trimkv")
    for t in range(64):
        eng.step(int(rng.integers(0, TINY.vocab_size)))
        assert all(s <= 6 for layer in eng.cache_sizes() for s in layer)


def test_engine_full_prefill_matches_batched_forward(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(3).integers(0, TINY.vocab_size, size=12)
    eng = DecodeEngine(TINY, weights, gates, budget=None)
    last = eng.prefill(tokens)
    ref = forward_teacher(tokens, TINY, weights).logits[-1]
    assert np.abs(last - ref).max() < 1e-4


def test_decode_step_function(tiny_model):
    weights, gates = tiny_model
    eng = DecodeEngine(TINY, weights, gates, budget=4)
    logits, eng2 = decode_step(eng, 3)
    assert logits.shape == (TINY.vocab_size,)
    assert eng2 is eng and eng.t == 1


# ------------------------------------------------------------------ prefill

def test_chunked_prefill_short_prompt_matches_unchunked(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(4).integers(0, TINY.vocab_size, size=8)
    a = chunked_prefill(tokens, 3, 16, TINY, weights, gates)
    b = chunked_prefill(tokens, 8, 16, TINY, weights, gates)
    for l in range(TINY.n_layers):
        for h in range(TINY.n_kv_heads):
            pa = [e.position for e in a.caches[l][h]]
            pb = [e.position for e in b.caches[l][h]]
            assert pa == pb == list(range(8))


def test_chunk_size_one_equals_stepwise_decode(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(5).integers(0, TINY.vocab_size, size=24)
    chunked = chunked_prefill(tokens, 1, 5, TINY, weights, gates,
                              policy="trimkv", record_trace=True)
    stepped = DecodeEngine(TINY, weights, gates, budget=5, policy="trimkv",
                           record_trace=True)
    for tok in tokens:
        stepped.step(int(tok))
    assert chunked.trace.rows == stepped.trace.rows


def test_chunked_prefill_compression_event_count(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(6).integers(0, TINY.vocab_size, size=256)
    eng = chunked_prefill(tokens, 64, 64, TINY, weights, gates, policy="recency_window")
    assert eng.compression_events == 4
    assert all(s == 64 for layer in eng.cache_sizes() for s in layer)


def test_chunked_prefill_rejects_bad_chunk_size(tiny_model):
    weights, gates = tiny_model
    with pytest.raises(ConfigError):
        chunked_prefill(np.zeros(4, dtype=int), 0, 4, TINY, weights, gates)


# ------------------------------------------------------------------ traces

def test_full_cache_trace_is_all_ones(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(7).integers(0, TINY.vocab_size, size=6)
    eng = DecodeEngine(TINY, weights, gates, budget=None, record_trace=True)
    for tok in tokens:
        eng.step(int(tok))
    for rows in eng.trace.rows.values():
        for t, mask in rows:
            assert mask == (1 << (t + 1)) - 1


def test_bounded_trace_rows_capped_and_monotone(tiny_model):
    weights, gates = tiny_model
    rng = np.random.default_rng(8)
    eng = DecodeEngine(TINY, weights, gates, budget=5, policy="trimkv",
                       record_trace=True)
    for _ in range(40):
        eng.step(int(rng.integers(0, TINY.vocab_size)))
    assert eng.trace.is_monotone()
    for rows in eng.trace.rows.values():
        for t, mask in rows:
            assert bin(mask).count("1") <= max(5, t + 1 if t < 5 else 5)


def test_trace_csv_and_binary_round_trip(tmp_path, tiny_model):
    weights, gates = tiny_model
    rng = np.random.default_rng(9)
    eng = DecodeEngine(TINY, weights, gates, budget=4, policy="recency_window",
                       record_trace=True)
    for _ in range(10):
        eng.step(int(rng.integers(0, TINY.vocab_size)))
    csv_path = tmp_path / "trace.csv"
    write_trace_csv(eng.trace, 0, 0, csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "t,i,alive"
    assert lines[1] == "0,0,1"
    bin_path = tmp_path / "trace.bits"
    save_trace_bits(eng.trace, bin_path)
    back = load_trace_bits(bin_path)
    assert back.rows == eng.trace.rows


# ------------------------------------------------------------------ replay

def test_head_deviation_zero_when_budget_covers_everything():
    rng = np.random.default_rng(10)
    T, d = 9, 3
    q = rng.normal(size=(T, d))
    k = rng.normal(size=(T, d))
    v = rng.normal(size=(T, d))
    lb = -rng.uniform(0.01, 1.0, size=T)
    for spec in ("trimkv", "recency_window", "random:1"):
        dev = head_deviation(q, k, v, lb, T, parse_policy(spec)(), d**-0.5)
        assert dev == 0.0


def test_replay_deviation_decreases_with_budget(tiny_model):
    weights, gates = tiny_model
    tokens = np.random.default_rng(11).integers(0, TINY.vocab_size, size=24)
    run = record_run(tokens, TINY, weights, gates)
    d_small = replay_deviation(run, 4, "recency_window")
    d_large = replay_deviation(run, 23, "recency_window")
    d_all = replay_deviation(run, 24, "recency_window")
    assert d_all == 0.0
    assert d_large <= d_small
    assert d_small > 0.0


# ------------------------------------------------------------------ oracle

def test_oracle_keeps_everything_when_budget_covers():
    rng = np.random.default_rng(12)
    q, k, v = (rng.normal(size=(4, 3)) for _ in range(3))
    schedule, dev, _ = oracle_optimal_eviction(q, k, v, 4)
    assert dev == 0.0
    assert schedule[-1] == (0, 1, 2, 3)


def test_oracle_enumerates_expected_schedule_count():
    rng = np.random.default_rng(13)
    q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
    _, _, n = oracle_optimal_eviction(q, k, v, 2, prune=False)
    assert n == 2
    q, k, v = (rng.normal(size=(6, 2)) for _ in range(3))
    _, _, n = oracle_optimal_eviction(q, k, v, 2, prune=False)
    assert n == 2 ** 4


def test_oracle_lower_bounds_heuristics():
    rng = np.random.default_rng(14)
    for trial in range(5):
        T, d, M = 8, 3, 3
        q = rng.normal(size=(T, d))
        k = rng.normal(size=(T, d))
        v = rng.normal(size=(T, d))
        lb = -rng.uniform(0.01, 1.0, size=T)
        _, best, _ = oracle_optimal_eviction(q, k, v, M)
        for spec in ("trimkv", "recency_window", "sink_window:1", "h2o", "random:7"):
            dev = head_deviation(q, k, v, lb, M, parse_policy(spec)(), d**-0.5)
            assert best <= dev + 1e-12, spec


def test_oracle_size_guard():
    rng = np.random.default_rng(15)
    q, k, v = (rng.normal(size=(13, 2)) for _ in range(3))
    with pytest.raises(SizeGuardError):
        oracle_optimal_eviction(q, k, v, 3)

import math

import numpy as np
import pytest

from trimkv.analysis import (
    build_retention_map,
    deviation_vs_budget,
    sparsity_estimate,
    sparsity_from_log_betas,
    write_deviation_csv,
    write_retention_csv,
    write_sparsity_csv,
)
from trimkv.cache import DecodeEngine, record_run
from trimkv.errors import SizeGuardError
from trimkv.model import ModelConfig, init_gates, init_weights

TINY = ModelConfig(n_layers=2, n_heads=2, n_kv_heads=2, d_model=8, d_head=4,
                   d_ff=8, vocab_size=16, max_seq=8192, gate_hidden=4)


def naive_sparsity(betas):
    T = len(betas)
    total = sum(betas[i] ** (t - i) for t in range(T) for i in range(t + 1))
    return 1.0 - 2.0 * total / (T * (T + 1))


def engine_run(log_betas_seq):
    """Bare engine shell carrying only a single head's log-beta history."""
    eng = DecodeEngine.__new__(DecodeEngine)
    eng.log_beta_history = [[list(log_betas_seq)]]
    return eng


def test_retention_map_near_one_betas():
    eng = engine_run([-1e-12] * 5)
    m = build_retention_map(eng, 0, 0).matrix
    tri = np.tril(np.ones((5, 5)))
    assert np.allclose(m, tri, atol=1e-9)
    assert np.array_equal(np.diag(m), np.ones(5))


def test_retention_map_geometric_column():
    eng = engine_run([math.log(0.5), -0.01, -0.01, -0.01])
    m = build_retention_map(eng, 0, 0).matrix
    assert np.allclose(m[:, 0], [1.0, 0.5, 0.25, 0.125], atol=1e-12)


def test_retention_map_diagonal_and_monotone_columns():
    rng = np.random.default_rng(0)
    eng = engine_run(np.log(rng.uniform(0.1, 0.99, size=12)).tolist())
    m = build_retention_map(eng, 0, 0).matrix
    assert np.array_equal(np.diag(m), np.ones(12))
    for i in range(12):
        col = m[i:, i]
        assert (np.diff(col) <= 0).all()


def test_retention_map_size_guard():
    eng = engine_run([-0.1] * 5000)
    with pytest.raises(SizeGuardError):
        build_retention_map(eng, 0, 0)


def test_sparsity_all_one_betas_is_zero():
    assert abs(sparsity_from_log_betas(np.zeros(7))) < 1e-12


def test_sparsity_tiny_betas_t3():
    val = sparsity_from_log_betas(np.full(3, -69.0))
    assert math.isclose(val, 0.5, abs_tol=1e-9)


def test_sparsity_matches_naive_loop():
    rng = np.random.default_rng(1)
    betas = rng.uniform(0.05, 0.999, size=16)
    assert math.isclose(
        sparsity_from_log_betas(np.log(betas)), naive_sparsity(betas), abs_tol=1e-10
    )


def test_sparsity_report_shape():
    rng = np.random.default_rng(2)
    weights = init_weights(TINY, rng)
    gates = init_gates(TINY, rng)
    eng = DecodeEngine(TINY, weights, gates, budget=4)
    for t in range(10):
        eng.step(int(rng.integers(0, TINY.vocab_size)))
    report = sparsity_estimate(eng)
    assert len(report.rows) == TINY.n_layers * TINY.n_kv_heads
    for _, _, s in report.rows:
        assert 0.0 <= s <= 1.0


def test_deviation_table_full_budget_is_zero():
    rng = np.random.default_rng(3)
    weights = init_weights(TINY, rng)
    gates = init_gates(TINY, rng)
    tokens = rng.integers(0, TINY.vocab_size, size=10)
    run = record_run(tokens, TINY, weights, gates)
    rows = deviation_vs_budget(run, ["trimkv", "recency_window", "random:1"], [10])
    for r in rows:
        assert r["deviation"] == 0.0


def test_deviation_non_increasing_at_full_keep_boundary():
    rng = np.random.default_rng(4)
    weights = init_weights(TINY, rng)
    gates = init_gates(TINY, rng)
    tokens = rng.integers(0, TINY.vocab_size, size=12)
    run = record_run(tokens, TINY, weights, gates)
    rows = deviation_vs_budget(run, ["recency_window"], [11, 12])
    assert rows[1]["deviation"] <= rows[0]["deviation"]


def test_csv_writers_deterministic(tmp_path):
    eng = engine_run([math.log(0.7)] * 4)
    rmap = build_retention_map(eng, 0, 0)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_retention_csv(rmap, p1)
    write_retention_csv(rmap, p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "t,i,value"
    assert lines[1] == "0,0,1.0"

    from trimkv.analysis import SparsityReport

    s1, s2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    report = SparsityReport(rows=[(0, 0, 0.25), (0, 1, 0.5)])
    write_sparsity_csv(report, s1)
    write_sparsity_csv(report, s2)
    assert s1.read_bytes() == s2.read_bytes()
    assert s1.read_text().splitlines()[0] == "layer,head,sparsity"

    d1 = tmp_path / "d.csv"
    write_deviation_csv([{"policy": "trimkv", "M": 4, "deviation": 0.125, "accuracy": 0.75}], d1)
    assert d1.read_text().splitlines() == [
        "policy,M,deviation,accuracy",
        "trimkv,4,0.125,0.75",
    ]

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from trimkv_plots.render import FigureSpec, SpecError, main, render_figure


def write_spec(tmp_path, **kw) -> Path:
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(kw))
    return path


def retention_csv(tmp_path, T=8, value=1.0) -> Path:
    path = tmp_path / "retention.csv"
    lines = ["t,i,value"]
    for t in range(T):
        for i in range(t + 1):
            lines.append(f"{t},{i},{repr(float(value))}")
    path.write_text("\n".join(lines) + "\n")
    return path


def recency_trace_csv(tmp_path, T=64, M=16) -> Path:
    """Sliding-window geometry: position i alive at step t iff t-M < i <= t."""
    path = tmp_path / "trace.csv"
    lines = ["t,i,alive"]
    for t in range(T):
        for i in range(t + 1):
            lines.append(f"{t},{i},{1 if i > t - M else 0}")
    path.write_text("\n".join(lines) + "\n")
    return path


def sparsity_csv(tmp_path) -> Path:
    path = tmp_path / "sparsity.csv"
    rows = ["layer,head,sparsity"]
    for layer in range(3):
        for head in range(4):
            rows.append(f"{layer},{head},{repr(0.1 * (layer + head))}")
    path.write_text("\n".join(rows) + "\n")
    return path


def frontier_csv(tmp_path, policies=("trimkv",), budgets=(64, 128)) -> Path:
    path = tmp_path / "frontier.csv"
    rows = ["policy,M,deviation,accuracy"]
    for p in policies:
        for m in budgets:
            rows.append(f"{p},{m},{repr(1.0 / m)},{repr(min(1.0, m / 128))}")
    path.write_text("\n".join(rows) + "\n")
    return path


def pixel_at(fig, ax, x, y):
    fig.canvas.draw()
    buf = np.asarray(fig.canvas.buffer_rgba())
    px, py = ax.transData.transform((x, y))
    return buf[buf.shape[0] - 1 - int(round(py)), int(round(px))]


def test_spec_load_and_validation(tmp_path):
    path = write_spec(tmp_path, kind="frontier", input="x.csv", output="y.png")
    spec = FigureSpec.load(path)
    assert spec.kind == "frontier"
    with pytest.raises(SpecError):
        FigureSpec.load(write_spec(tmp_path, kind="nope", input="a", output="b"))
    with pytest.raises(SpecError):
        FigureSpec.load(write_spec(tmp_path, kind="frontier", input="a", output="b",
                                   bogus=1))


@pytest.mark.parametrize("kind,maker", [
    ("retention_heatmap", retention_csv),
    ("eviction_map", recency_trace_csv),
    ("sparsity_grid", sparsity_csv),
    ("frontier", frontier_csv),
])
def test_dump_matrix_round_trips_byte_identically(tmp_path, kind, maker):
    csv_path = maker(tmp_path)
    out = tmp_path / "dump.csv"
    spec = write_spec(tmp_path, kind=kind, input=str(csv_path), output=str(tmp_path / "x.png"))
    assert main(["--spec", str(spec), "--dump-matrix", str(out)]) == 0
    assert out.read_bytes() == csv_path.read_bytes()


@pytest.mark.parametrize("kind,maker", [
    ("retention_heatmap", retention_csv),
    ("eviction_map", recency_trace_csv),
    ("sparsity_grid", sparsity_csv),
    ("frontier", frontier_csv),
])
def test_render_writes_deterministic_png(tmp_path, kind, maker):
    csv_path = maker(tmp_path)
    out1 = tmp_path / "fig1.png"
    out2 = tmp_path / "fig2.png"
    for out in (out1, out2):
        spec = write_spec(tmp_path, kind=kind, input=str(csv_path), output=str(out),
                          title="test")
        assert main(["--spec", str(spec)]) == 0
    assert out1.stat().st_size > 0
    assert out1.read_bytes() == out2.read_bytes()


def test_uniform_retention_renders_uniform_triangle(tmp_path):
    csv_path = retention_csv(tmp_path, T=8, value=1.0)
    spec = FigureSpec(kind="retention_heatmap", input=str(csv_path),
                      output=str(tmp_path / "x.png"))
    fig, ax = render_figure(spec)
    colors = [tuple(pixel_at(fig, ax, i, t)) for t, i in [(4, 0), (4, 4), (7, 2)]]
    assert len(set(colors)) == 1  # one uniform color across the triangle
    masked = tuple(pixel_at(fig, ax, 6, 2))  # i > t: above the diagonal
    assert masked != colors[0]


def test_frontier_single_policy_two_point_line(tmp_path):
    csv_path = frontier_csv(tmp_path, policies=("trimkv",), budgets=(64, 128))
    spec = FigureSpec(kind="frontier", input=str(csv_path),
                      output=str(tmp_path / "f.png"))
    fig, ax = render_figure(spec)
    lines = ax.get_lines()
    assert len(lines) == 1
    assert list(lines[0].get_xdata()) == [64, 128]


def test_eviction_map_shows_diagonal_band(tmp_path):
    T, M = 64, 16
    csv_path = recency_trace_csv(tmp_path, T=T, M=M)
    spec = FigureSpec(kind="eviction_map", input=str(csv_path),
                      output=str(tmp_path / "e.png"))
    fig, ax = render_figure(spec)

    def rgb(x, y):
        return pixel_at(fig, ax, x, y)[:3].astype(int)

    for t, i in [(40, 30), (40, 40), (63, 50), (20, 10)]:  # inside the band
        assert (rgb(i, t) > 180).all(), (t, i)
    for t, i in [(40, 5), (63, 10), (30, 2)]:  # evicted region
        assert (rgb(i, t) < 80).all(), (t, i)
    band = rgb(30, 40)
    masked = rgb(40, 30)  # i > t
    assert not np.array_equal(band, masked)


def test_header_mismatch_exits_2_naming_column(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,j,value\n0,0,1.0\n")
    spec = write_spec(tmp_path, kind="retention_heatmap", input=str(bad),
                      output=str(tmp_path / "x.png"))
    assert main(["--spec", str(spec)]) == 2
    assert "'i'" in capsys.readouterr().err


def test_unreadable_spec_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["--spec", str(p)]) == 2


@pytest.mark.skipif(shutil.which("trimkv") is None, reason="engine CLI not installed")
def test_integration_renders_real_engine_exports(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "task = associative_recall\nn_pairs = 2\nseq_len = 16\nvocab_size = 48\n"
        "n_train = 32\nn_eval = 8\ntask_seed = 5\n"
        "n_layers = 2\nn_heads = 2\nn_kv_heads = 2\nd_model = 8\nd_head = 4\n"
        "d_ff = 16\nmax_seq = 64\ngate_hidden = 8\n"
        "steps = 2\nbatch_size = 2\ngrad_accum = 1\nseed = 3\n"
    )
    teacher = tmp_path / "teacher"
    subprocess.run(["trimkv", "train-teacher", "--config", str(cfg),
                    "--out", str(teacher)], check=True)
    run_dir = tmp_path / "eval"
    subprocess.run([
        "trimkv", "evaluate", "--ckpt", str(teacher / "checkpoint.trimkv"),
        "--task", "associative_recall,n_pairs=2,seq_len=16,vocab_size=48,n_eval=4,seed=5",
        "--policy", "recency_window", "--budget", "6",
        "--trace", "--out", str(run_dir),
    ], check=True)
    for kind, name in [
        ("retention_heatmap", "retention_L0H0.csv"),
        ("eviction_map", "trace_L0H0.csv"),
        ("sparsity_grid", "sparsity.csv"),
        ("frontier", "deviation.csv"),
    ]:
        out_png = tmp_path / f"{kind}.png"
        spec = write_spec(tmp_path, kind=kind, input=str(run_dir / name),
                          output=str(out_png))
        assert main(["--spec", str(spec)]) == 0
        assert out_png.stat().st_size > 0
        # round trip the exact engine output
        dump = tmp_path / f"{kind}.dump.csv"
        assert main(["--spec", str(spec), "--dump-matrix", str(dump)]) == 0
        assert dump.read_bytes() == (run_dir / name).read_bytes()

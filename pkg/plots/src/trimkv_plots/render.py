"""Standalone renderer: ``render --spec spec.json`` turns a documented CSV
export into a raster figure. ``--dump-matrix PATH`` re-emits the parsed
input in canonical form for byte-level round-trip checks; rendering never
alters or reorders the data it reads.

Figure kinds and their expected CSV headers:
  retention_heatmap  t,i,value                 (lower-triangular, [0, 1])
  eviction_map       t,i,alive                 (lower-triangular, binary)
  sparsity_grid      layer,head,sparsity
  frontier           policy,M,deviation,accuracy
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("retention_heatmap", "eviction_map", "sparsity_grid", "frontier")


class SpecError(ValueError):
    """Bad figure spec or CSV that does not match its documented header."""


@dataclass
class FigureSpec:
    kind: str
    input: str
    output: str
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    y_column: str = "accuracy"  # frontier only: accuracy or deviation

    @classmethod
    def load(cls, path) -> "FigureSpec":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(raw) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        spec = cls(**raw)
        if spec.kind not in KINDS:
            raise SpecError(f"unknown figure kind {spec.kind!r}; expected one of {KINDS}")
        return spec


def _read_rows(path, expected_header: list[str]) -> list[list[str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SpecError(f"{path}: empty CSV") from None
        if header != expected_header:
            missing = [c for c in expected_header if c not in header]
            if missing:
                raise SpecError(f"{path}: missing column {missing[0]!r} "
                                f"(expected header {','.join(expected_header)})")
            raise SpecError(f"{path}: header {header} does not match "
                            f"{expected_header}")
        return [row for row in reader if row]


def parse_triangular(path, value_column: str) -> np.ndarray:
    """(T, T) matrix from ``t,i,<value>`` rows; cells above the diagonal are
    NaN (never written by the exporters)."""
    rows = _read_rows(path, ["t", "i", value_column])
    T = max(int(r[0]) for r in rows) + 1
    m = np.full((T, T), np.nan)
    for t, i, value in rows:
        m[int(t), int(i)] = float(value)
    return m


def parse_sparsity(path) -> np.ndarray:
    rows = _read_rows(path, ["layer", "head", "sparsity"])
    n_layers = max(int(r[0]) for r in rows) + 1
    n_heads = max(int(r[1]) for r in rows) + 1
    grid = np.full((n_layers, n_heads), np.nan)
    for layer, head, value in rows:
        grid[int(layer), int(head)] = float(value)
    return grid


def parse_frontier(path) -> dict[str, list[tuple[int, float, float]]]:
    rows = _read_rows(path, ["policy", "M", "deviation", "accuracy"])
    series: dict[str, list[tuple[int, float, float]]] = {}
    for policy, m, deviation, accuracy in rows:
        series.setdefault(policy, []).append((int(m), float(deviation), float(accuracy)))
    return series


def dump_matrix(spec: FigureSpec, out_path) -> None:
    """Re-emit the parsed input in canonical CSV form (byte-identical to
    inputs produced by the engine's exporters)."""
    lines: list[str] = []
    if spec.kind in ("retention_heatmap", "eviction_map"):
        col = "value" if spec.kind == "retention_heatmap" else "alive"
        m = parse_triangular(spec.input, col)
        lines.append(f"t,i,{col}")
        for t in range(m.shape[0]):
            for i in range(t + 1):
                if not np.isnan(m[t, i]):
                    v = m[t, i]
                    lines.append(f"{t},{i},{int(v) if spec.kind == 'eviction_map' else repr(float(v))}")
    elif spec.kind == "sparsity_grid":
        grid = parse_sparsity(spec.input)
        lines.append("layer,head,sparsity")
        for layer in range(grid.shape[0]):
            for head in range(grid.shape[1]):
                if not np.isnan(grid[layer, head]):
                    lines.append(f"{layer},{head},{repr(float(grid[layer, head]))}")
    else:
        series = parse_frontier(spec.input)
        lines.append("policy,M,deviation,accuracy")
        for policy, pts in series.items():
            for m, deviation, accuracy in pts:
                lines.append(f"{policy},{m},{repr(deviation)},{repr(accuracy)}")
    Path(out_path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def render_figure(spec: FigureSpec):
    """Build the matplotlib figure for a spec; returns (fig, ax)."""
    fig, ax = plt.subplots(figsize=(6.0, 5.0), dpi=100)
    if spec.kind in ("retention_heatmap", "eviction_map"):
        col = "value" if spec.kind == "retention_heatmap" else "alive"
        m = parse_triangular(spec.input, col)
        masked = np.ma.masked_invalid(m)
        cmap = plt.get_cmap("viridis" if spec.kind == "retention_heatmap" else "binary_r").copy()
        cmap.set_bad("lightgray")
        im = ax.imshow(masked, cmap=cmap, vmin=0.0, vmax=1.0,
                       origin="upper", interpolation="nearest")
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel(spec.xlabel or "token position i")
        ax.set_ylabel(spec.ylabel or "decode step t")
    elif spec.kind == "sparsity_grid":
        grid = parse_sparsity(spec.input)
        im = ax.imshow(np.ma.masked_invalid(grid), cmap="magma", vmin=0.0, vmax=1.0,
                       origin="upper", interpolation="nearest")
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel(spec.xlabel or "kv head")
        ax.set_ylabel(spec.ylabel or "layer")
        ax.set_xticks(range(grid.shape[1]))
        ax.set_yticks(range(grid.shape[0]))
    else:
        series = parse_frontier(spec.input)
        y_idx = {"deviation": 1, "accuracy": 2}.get(spec.y_column)
        if y_idx is None:
            raise SpecError(f"frontier y_column must be deviation or accuracy, "
                            f"got {spec.y_column!r}")
        for policy, pts in sorted(series.items()):
            pts = sorted(pts)
            ax.plot([p[0] for p in pts], [p[y_idx] for p in pts],
                    marker="o", label=policy)
        ax.set_xlabel(spec.xlabel or "memory budget M")
        ax.set_ylabel(spec.ylabel or spec.y_column)
        ax.legend()
    if spec.title:
        ax.set_title(spec.title)
    return fig, ax


def render(spec: FigureSpec) -> None:
    fig, _ = render_figure(spec)
    fig.savefig(spec.output, metadata={"Software": "trimkv-plots"})
    plt.close(fig)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="render",
        description="Render engine CSV exports as figures.",
        epilog="exit codes: 0 ok, 1 I/O, 2 spec/format error",
    )
    parser.add_argument("--spec", required=True, help="figure spec JSON")
    parser.add_argument("--dump-matrix", metavar="PATH",
                        help="write the parsed input back out canonically and exit")
    args = parser.parse_args(argv)
    try:
        spec = FigureSpec.load(args.spec)
        if args.dump_matrix:
            dump_matrix(spec, args.dump_matrix)
        else:
            render(spec)
        return 0
    except (SpecError, json.JSONDecodeError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()

"""Offline figure rendering for the engine's CSV exports: decayed-retention
heatmaps, eviction maps, per-head sparsity grids, and budget-frontier
charts. Consumes only the documented CSV formats."""

__version__ = "0.1.0"

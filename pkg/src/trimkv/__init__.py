"""Desk-scale engine for retention-gated attention and budgeted KV-cache
eviction: gate training on top of a frozen toy transformer, bounded-cache
decoding with learned and heuristic eviction policies, and the analysis
exports built on top of recorded runs.

Submodules are imported lazily; ``import trimkv`` stays cheap so the CLI can
configure threading before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "analysis",
    "attnkern",
    "cache",
    "cli",
    "errors",
    "gates",
    "losses",
    "model",
    "numkern",
    "tasks",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

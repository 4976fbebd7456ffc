"""Structured pruning at initialisation: global magnitude pruning, a per-layer
sensitivity plan, and rectification of resilient layers into smaller dense ones."""

__version__ = "0.1.0"

from .model import LayerSpec, ModelGraph, SparsityMask, validate
from .pipeline import PruneResult, prune_model
from .presets import build_preset
from .pruner import PruneConfig, magnitude_prune
from .rectifier import apply_plan
from .sensitivity import PrunePlan, build_plan

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "PruneConfig",
    "PrunePlan",
    "PruneResult",
    "SparsityMask",
    "apply_plan",
    "build_plan",
    "build_preset",
    "magnitude_prune",
    "prune_model",
    "validate",
]

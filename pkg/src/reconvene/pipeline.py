"""End-to-end pruning at initialisation: unstructured prune, plan, rectify."""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelGraph
from .policies import make_plan
from .pruner import PruneConfig, unstructured_prune
from .rectifier import apply_plan
from .sensitivity import PrunePlan


@dataclass(frozen=True, eq=False)
class PruneResult:
    sparse: ModelGraph
    plan: PrunePlan
    pruned: ModelGraph


def prune_model(dense: ModelGraph, config: PruneConfig) -> PruneResult:
    sparse = unstructured_prune(dense, config)
    plan = make_plan(sparse, config)
    pruned = apply_plan(sparse, plan, config.seed, reinit=config.reinit)
    return PruneResult(sparse, plan, pruned)

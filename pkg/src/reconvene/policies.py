"""Ablation policies, expressed as transformations of a prune plan so that
every variant goes through the same rectifier."""

from __future__ import annotations

from .init import STREAM_POLICY, stream
from .model import ModelGraph
from .pruner import PruneConfig
from .sensitivity import PrunePlan, average_sparsity, build_plan, entry_for, layer_stats


def _plan_with_flags(graph: ModelGraph, flags, policy: str, include_linear: bool = True) -> PrunePlan:
    stats = layer_stats(graph)
    s_avg = average_sparsity(stats, include_linear)
    entries = [entry_for(s, True if s.kind != "conv2d" else flags(s)) for s in stats]
    return PrunePlan(s_avg, tuple(entries), policy)


def plan_upai(graph: ModelGraph, include_linear_in_avg: bool = True) -> PrunePlan:
    """Every layer sensitive: unstructured pruning plus sparse reinit only."""
    return _plan_with_flags(graph, lambda s: True, "upai", include_linear_in_avg)


def plan_spai_all(graph: ModelGraph, include_linear_in_avg: bool = True) -> PrunePlan:
    """Every conv layer rectified, whatever its sparsity."""
    return _plan_with_flags(graph, lambda s: False, "spai_all", include_linear_in_avg)


def plan_inverted(plan: PrunePlan) -> PrunePlan:
    """Flip the sensitivity of every conv entry."""
    entries = [
        e if e.kind != "conv2d" else entry_for(e.stat, not e.sensitive) for e in plan.entries
    ]
    policy = "reconvene" if plan.policy == "inverted" else "inverted"
    return plan.with_entries(entries, policy)


def plan_random(
    graph: ModelGraph,
    seed: int,
    mode: str = "matched",
    include_linear_in_avg: bool = True,
) -> PrunePlan:
    """Mark conv layers sensitive at random.

    In ``matched`` mode the probability equals the sensitive fraction of the
    real plan, so the expected count matches; ``coin`` uses 1/2.
    """
    base = build_plan(graph, include_linear_in_avg)
    conv = [e for e in base.entries if e.kind == "conv2d"]
    if mode == "matched":
        q = sum(e.sensitive for e in conv) / len(conv) if conv else 0.0
    elif mode == "coin":
        q = 0.5
    else:
        raise ValueError(f"unknown random mode {mode!r}")
    draws = stream(seed, STREAM_POLICY).random(len(conv))
    flags = {e.layer: bool(u < q) for e, u in zip(conv, draws)}
    return _plan_with_flags(graph, lambda s: flags[s.layer_index], "random", include_linear_in_avg)


def make_plan(graph: ModelGraph, config: PruneConfig) -> PrunePlan:
    """Plan for ``config.policy`` on an unstructured-pruned graph."""
    inc = config.include_linear_in_avg
    if config.policy == "reconvene":
        return build_plan(graph, inc)
    if config.policy == "upai":
        return plan_upai(graph, inc)
    if config.policy == "spai_all":
        return plan_spai_all(graph, inc)
    if config.policy == "inverted":
        return plan_inverted(build_plan(graph, inc))
    if config.policy == "random":
        return plan_random(graph, config.seed, config.random_mode, inc)
    raise ValueError(f"unknown policy {config.policy!r}")

"""Pruning sensitivity evaluation: per-layer sparsity, the sensitivity rule and
the structured-pruning channel plan.

Sparsities are compared as exact rationals so that a layer whose sparsity
equals the model average is classified deterministically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from numbers import Real
from typing import Sequence

import numpy as np

from .model import ModelGraph


@dataclass(frozen=True)
class LayerSparsityStats:
    layer_index: int
    n_channels: int
    n_total: int
    n_zero: int
    kind: str = "conv2d"

    def __post_init__(self) -> None:
        if self.n_total <= 0:
            raise ValueError(f"layer {self.layer_index} has no weights")
        if not 0 <= self.n_zero <= self.n_total:
            raise ValueError(f"layer {self.layer_index}: n_zero out of range")

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.n_zero, self.n_total)

    @property
    def sparsity(self) -> float:
        return self.n_zero / self.n_total


def layer_stats(graph: ModelGraph) -> list[LayerSparsityStats]:
    """Zero/total counts for every prunable layer, by direct scan of the weights."""
    stats = []
    for i, layer in enumerate(graph.layers):
        if not layer.prunable:
            continue
        w = layer.weight
        stats.append(
            LayerSparsityStats(
                layer_index=i,
                n_channels=layer.n_out,
                n_total=int(w.size),
                n_zero=int(w.size - np.count_nonzero(w)),
                kind=layer.kind,
            )
        )
    return stats


def global_sparsity(stats: Sequence[LayerSparsityStats]) -> Fraction:
    """Sum of zeros over sum of weights (not the mean of per-layer ratios)."""
    if not stats:
        raise ValueError("global_sparsity needs at least one layer")
    return Fraction(sum(s.n_zero for s in stats), sum(s.n_total for s in stats))


def classify(stat: LayerSparsityStats, s_avg: Real) -> bool:
    """True if the layer is sensitive (sparser layers, including ties, are resilient)."""
    return stat.ratio < s_avg


def plan_channels(stat: LayerSparsityStats) -> int:
    """Channels kept when a layer is converted to a dense one of equal size.

    ``ceil(N * S)`` channels are removed, with at least one channel kept.
    """
    n = stat.n_channels
    removed = -(-n * stat.n_zero // stat.n_total)
    return max(1, n - removed)


@dataclass(frozen=True)
class PlanEntry:
    layer: int
    sensitive: bool
    channels_before: int
    channels_after: int
    kind: str = "conv2d"
    n_zero: int = 0
    n_total: int = 1

    @property
    def stat(self) -> LayerSparsityStats:
        return LayerSparsityStats(self.layer, self.channels_before, self.n_total, self.n_zero, self.kind)

    @property
    def shrinks(self) -> bool:
        return self.channels_after < self.channels_before


@dataclass(frozen=True)
class PrunePlan:
    global_sparsity: Fraction
    entries: tuple[PlanEntry, ...] = field(default_factory=tuple)
    policy: str = "reconvene"

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.layer)))
        for e in self.entries:
            if not 1 <= e.channels_after <= e.channels_before:
                raise ValueError(f"layer {e.layer}: channels_after out of range")
            if e.sensitive and e.channels_after != e.channels_before:
                raise ValueError(f"layer {e.layer}: sensitive layer cannot shrink")
            if e.kind != "conv2d" and (not e.sensitive):
                raise ValueError(f"layer {e.layer}: only conv2d layers can be resilient")

    @property
    def resilient(self) -> list[int]:
        return [e.layer for e in self.entries if not e.sensitive]

    @property
    def channel_sizes(self) -> list[int]:
        return [e.channels_after for e in self.entries if not e.sensitive]

    @property
    def is_noop(self) -> bool:
        return not any(e.shrinks for e in self.entries)

    def entry(self, layer: int) -> PlanEntry:
        for e in self.entries:
            if e.layer == layer:
                return e
        raise KeyError(layer)

    def with_entries(self, entries: Sequence[PlanEntry], policy: str) -> PrunePlan:
        return replace(self, entries=tuple(entries), policy=policy)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "global_sparsity": float(self.global_sparsity),
            "global_sparsity_exact": str(self.global_sparsity),
            "entries": [
                {
                    "layer": e.layer,
                    "kind": e.kind,
                    "sensitive": e.sensitive,
                    "channels_before": e.channels_before,
                    "channels_after": e.channels_after,
                    "n_zero": e.n_zero,
                    "n_total": e.n_total,
                    "sparsity": e.n_zero / e.n_total,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PrunePlan:
        entries = []
        for d in data["entries"]:
            d = {k: v for k, v in d.items() if k != "sparsity"}
            entries.append(PlanEntry(**d))
        exact = data.get("global_sparsity_exact")
        s = Fraction(exact) if exact is not None else Fraction(data["global_sparsity"])
        return cls(s, tuple(entries), data.get("policy", "reconvene"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def entry_for(stat: LayerSparsityStats, sensitive: bool) -> PlanEntry:
    after = stat.n_channels if sensitive else plan_channels(stat)
    return PlanEntry(
        layer=stat.layer_index,
        sensitive=sensitive,
        channels_before=stat.n_channels,
        channels_after=after,
        kind=stat.kind,
        n_zero=stat.n_zero,
        n_total=stat.n_total,
    )


def average_sparsity(stats: Sequence[LayerSparsityStats], include_linear: bool = True) -> Fraction:
    pool = [s for s in stats if include_linear or s.kind == "conv2d"]
    return global_sparsity(pool)


def build_plan(graph: ModelGraph, include_linear_in_avg: bool = True) -> PrunePlan:
    """Classify each conv layer against the global average sparsity.

    Linear layers are listed but always sensitive; they are never
    structurally pruned.
    """
    stats = layer_stats(graph)
    s_avg = average_sparsity(stats, include_linear_in_avg)
    entries = [
        entry_for(s, True if s.kind != "conv2d" else classify(s, s_avg)) for s in stats
    ]
    return PrunePlan(s_avg, tuple(entries), "reconvene")

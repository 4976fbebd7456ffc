"""Global magnitude pruning at initialisation and sparse/dense reinitialisation."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .init import STREAM_REINIT_DENSE, STREAM_REINIT_SPARSE, kaiming_normal, stream
from .model import LayerSpec, ModelGraph, SparsityMask

POLICIES = ("reconvene", "upai", "spai_all", "inverted", "random")


@dataclass(frozen=True)
class PruneConfig:
    p: float
    seed: int = 0
    pruner: str = "magnitude"
    policy: str = "reconvene"
    reinit: bool = True
    # random policy: "matched" keeps the sensitive-layer count of the reconvene plan in expectation
    random_mode: str = "matched"
    # whether linear layers contribute to the global average sparsity
    include_linear_in_avg: bool = True

    def __post_init__(self) -> None:
        check_degree(self.p)
        if self.pruner not in PRUNERS:
            raise ValueError(f"unknown pruner {self.pruner!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.random_mode not in ("matched", "coin"):
            raise ValueError(f"unknown random_mode {self.random_mode!r}")


def check_degree(p: float) -> None:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"pruning degree p must be in [0, 1], got {p}")


def removal_count(p: float, total: int) -> int:
    """floor(p * total), with ``p`` read as the decimal the user wrote.

    ``Fraction(repr(0.95))`` is exactly 19/20, whereas the binary double is a
    hair below 0.95 and would floor one element short on round totals.
    """
    check_degree(p)
    return int(Fraction(repr(float(p))) * total)


def _select_smallest(magnitudes: np.ndarray, k: int) -> np.ndarray:
    """Boolean array marking the ``k`` smallest entries.

    Ties at the threshold go to the lowest flat index, which is the same
    result a stable ascending sort would give.
    """
    n = magnitudes.size
    drop = np.zeros(n, dtype=bool)
    if k <= 0:
        return drop
    if k >= n:
        drop[:] = True
        return drop
    threshold = np.partition(magnitudes, k - 1)[k - 1]
    below = magnitudes < threshold
    drop |= below
    remaining = k - int(below.sum())
    ties = np.flatnonzero(magnitudes == threshold)[:remaining]
    drop[ties] = True
    return drop


def magnitude_prune(graph: ModelGraph, p: float) -> ModelGraph:
    """Zero the ``floor(p * total)`` globally smallest prunable weights.

    Ranking is across all conv2d and linear weight tensors at once, so layers
    end up with different sparsities.  Every prunable layer gets a mask.
    """
    check_degree(p)
    idx = graph.prunable_indices()
    flat = [np.abs(graph[i].weight.ravel()) for i in idx]
    sizes = [a.size for a in flat]
    total = sum(sizes)
    k = removal_count(p, total)
    drop = _select_smallest(np.concatenate(flat) if flat else np.zeros(0), k)

    layers = list(graph.layers)
    start = 0
    for i, size in zip(idx, sizes):
        layer = graph[i]
        keep = ~drop[start : start + size].reshape(layer.weight.shape)
        start += size
        weight = np.where(keep, layer.weight, 0).astype(layer.weight.dtype)
        layers[i] = layer.with_(weight=weight, mask=SparsityMask.from_bool(keep))
    return graph.with_layers(layers)


PRUNERS: dict[str, Callable[[ModelGraph, float], ModelGraph]] = {
    "magnitude": magnitude_prune,
}


def unstructured_prune(graph: ModelGraph, config: PruneConfig) -> ModelGraph:
    return PRUNERS[config.pruner](graph, config.p)


def reinit_sparse(layer: LayerSpec, seed: int, layer_index: int) -> LayerSpec:
    """Kaiming-normal values on the mask support; masked positions stay 0."""
    if layer.mask is None:
        raise ValueError("reinit_sparse needs a masked layer")
    rng = stream(seed, STREAM_REINIT_SPARSE, layer_index)
    w = kaiming_normal(layer.weight.shape, layer.fan_in, rng, layer.weight.dtype)
    w = np.where(layer.mask.dense, w, 0).astype(layer.weight.dtype)
    return layer.with_(weight=w, bias=np.zeros_like(layer.bias))


def reinit_dense(layer: LayerSpec, seed: int, layer_index: int) -> LayerSpec:
    rng = stream(seed, STREAM_REINIT_DENSE, layer_index)
    w = kaiming_normal(layer.weight.shape, layer.fan_in, rng, layer.weight.dtype)
    return layer.with_(weight=w, bias=np.zeros_like(layer.bias), mask=None)

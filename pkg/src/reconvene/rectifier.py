"""Resilient layer rectification: structured channel pruning, propagation of
the narrower channel counts downstream, and reinitialisation of the result."""

from __future__ import annotations

import numpy as np

from .model import LayerSpec, ModelGraph, ShapeError, SparsityMask, output_shape
from .pruner import reinit_dense, reinit_sparse
from .sensitivity import PrunePlan


class PlanMismatch(ValueError):
    """The plan was not built from this graph (stale indices or channel counts)."""


def structured_prune_layer(layer: LayerSpec, channels_after: int) -> LayerSpec:
    """Keep the first ``channels_after`` output channels as a dense layer."""
    if layer.kind != "conv2d":
        raise ValueError(f"structured pruning applies to conv2d layers, not {layer.kind}")
    if not 1 <= channels_after <= layer.out_channels:
        raise ValueError(
            f"channels_after={channels_after} outside [1, {layer.out_channels}]"
        )
    bias = None if layer.bias is None else layer.bias[:channels_after]
    return layer.with_(
        out_channels=channels_after,
        weight=layer.weight[:channels_after],
        bias=bias,
        mask=None,
    )


def _slice_mask(mask: SparsityMask | None, index) -> SparsityMask | None:
    if mask is None:
        return None
    return SparsityMask.from_bool(mask.dense[index])


def propagate_channels(graph: ModelGraph) -> ModelGraph:
    """Shrink downstream input dimensions to match narrowed conv outputs.

    A following conv2d loses its trailing input-channel slices; a linear layer
    behind a flatten loses the columns of the removed channels (flatten order
    is channel-major, so those columns are a trailing block).
    """
    layers = list(graph.layers)
    shape: tuple[int, ...] = graph.input_shape
    # channel count feeding the flatten, for mapping linear columns
    pre_flatten: tuple[int, ...] | None = None
    for i, layer in enumerate(layers):
        if layer.kind == "conv2d" and len(shape) == 3 and layer.in_channels != shape[0]:
            c = shape[0]
            if c > layer.in_channels:
                raise ShapeError(i, f"receives {c} channels but only has {layer.in_channels} inputs")
            layer = layer.with_(
                in_channels=c,
                weight=layer.weight[:, :c],
                mask=_slice_mask(layer.mask, np.s_[:, :c]),
            )
            layers[i] = layer
        elif layer.kind == "linear" and len(shape) == 1 and layer.in_features != shape[0]:
            n = shape[0]
            if pre_flatten is None or n > layer.in_features:
                raise ShapeError(i, f"cannot reconcile {layer.in_features} input features with {n}")
            c_new, h, w = pre_flatten
            spatial = h * w
            if layer.in_features % spatial or n != c_new * spatial:
                raise ShapeError(i, "input features are not a whole number of channel maps")
            layer = layer.with_(
                in_features=n,
                weight=layer.weight[:, :n],
                mask=_slice_mask(layer.mask, np.s_[:, :n]),
            )
            layers[i] = layer
        if layer.kind == "flatten":
            pre_flatten = shape if len(shape) == 3 else None
        elif layer.kind == "linear":
            pre_flatten = None
        try:
            shape = output_shape(layer, shape)
        except ValueError as exc:
            raise ShapeError(i, str(exc)) from None
    return graph.with_layers(layers)


def _check_plan(graph: ModelGraph, plan: PrunePlan) -> None:
    for e in plan.entries:
        if not 0 <= e.layer < len(graph.layers):
            raise PlanMismatch(f"plan names layer {e.layer}, graph has {len(graph.layers)}")
        layer = graph[e.layer]
        if layer.kind != e.kind or not layer.prunable:
            raise PlanMismatch(f"layer {e.layer} is {layer.kind}, plan says {e.kind}")
        if layer.n_out != e.channels_before:
            raise PlanMismatch(
                f"layer {e.layer} has {layer.n_out} channels, plan expects {e.channels_before}"
            )


def apply_plan(graph: ModelGraph, plan: PrunePlan, seed: int, reinit: bool = True) -> ModelGraph:
    """Rectify resilient layers and reinitialise the whole model.

    Order: structured-prune every shrinking entry, propagate channel counts,
    then reinitialise layers in ascending index (dense Kaiming for rectified
    layers, mask-preserving Kaiming for the sparse ones).  Reinitialising
    after propagation keeps each layer's variance tied to its final fan-in.
    Every draw comes from a stream keyed by (seed, layer index).
    """
    _check_plan(graph, plan)
    layers = list(graph.layers)
    rectified = set()
    for e in plan.entries:
        if e.sensitive:
            continue
        layers[e.layer] = structured_prune_layer(layers[e.layer], e.channels_after)
        rectified.add(e.layer)
    out = propagate_channels(graph.with_layers(layers))
    if not reinit:
        return out

    layers = list(out.layers)
    for i, layer in enumerate(layers):
        if not layer.prunable:
            continue
        if i in rectified or layer.mask is None:
            layers[i] = reinit_dense(layer, seed, i)
        else:
            layers[i] = reinit_sparse(layer, seed, i)
    return out.with_layers(layers)

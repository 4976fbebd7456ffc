"""Named architecture presets, Kaiming-initialised from a seed."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .init import STREAM_INIT, kaiming_normal, stream
from .model import LayerSpec, ModelGraph

# "M" marks a 2x2 max-pool
VGG_PLANS = {
    "vgg11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
}


def _vgg_layers(plan: Sequence, in_channels: int, class_count: int) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    c = in_channels
    for item in plan:
        if item == "M":
            layers.append(LayerSpec.maxpool2d(2))
            continue
        layers.append(LayerSpec.conv2d(item, c, 3, stride=1, padding=1))
        layers.append(LayerSpec.relu())
        c = item
    layers.append(LayerSpec.flatten())
    layers.append(LayerSpec.linear(class_count, c))
    return layers


def _resnet20_layers(class_count: int) -> list[LayerSpec]:
    # ResNet-20 conv stack with the skip connections dropped
    layers = [LayerSpec.conv2d(16, 3, 3, padding=1), LayerSpec.relu()]
    c = 16
    for stage, width in enumerate((16, 32, 64)):
        for block in range(3):
            for conv in range(2):
                stride = 2 if stage > 0 and block == 0 and conv == 0 else 1
                layers.append(LayerSpec.conv2d(width, c, 3, stride=stride, padding=1))
                layers.append(LayerSpec.relu())
                c = width
    layers.append(LayerSpec.maxpool2d(8))
    layers.append(LayerSpec.flatten())
    layers.append(LayerSpec.linear(class_count, c))
    return layers


def _toy4_layers(class_count: int) -> list[LayerSpec]:
    # four convs on a 3x16x16 input; the last one holds most of the weights
    # (as in VGG-style nets) and sees a 2x2 map, followed by a global max-pool
    return [
        LayerSpec.conv2d(8, 3, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(32, 8, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(128, 32, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(512, 128, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.flatten(),
        LayerSpec.linear(class_count, 512),
    ]


PRESETS = {
    "vgg16-cifar": (lambda k: _vgg_layers(VGG_PLANS["vgg16"], 3, k), (3, 32, 32), 10),
    "vgg11-cifar": (lambda k: _vgg_layers(VGG_PLANS["vgg11"], 3, k), (3, 32, 32), 10),
    "resnet20-shape-sequentialized": (_resnet20_layers, (3, 32, 32), 10),
    "toy4": (_toy4_layers, (3, 16, 16), 10),
}


def kaiming_init(graph: ModelGraph, seed: int, dtype=np.float32) -> ModelGraph:
    """Fresh Kaiming-normal weights and zero biases for every parameter layer."""
    layers = []
    for i, layer in enumerate(graph.layers):
        if not layer.prunable:
            layers.append(layer)
            continue
        shape = layer.declared_weight_shape
        w = kaiming_normal(shape, layer.fan_in, stream(seed, STREAM_INIT, i), dtype)
        layers.append(layer.with_(weight=w, bias=np.zeros(layer.n_out, dtype=dtype), mask=None))
    return graph.with_layers(layers)


def build_preset(
    name: str, seed: int = 0, class_count: int | None = None, dtype=np.float32
) -> ModelGraph:
    try:
        make, input_shape, default_classes = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    k = class_count or default_classes
    graph = ModelGraph(tuple(make(k)), input_shape, k, seed_provenance=seed)
    return kaiming_init(graph, seed, dtype)

"""Forward and backward passes over a ModelGraph, in numpy.

Convolutions use an im2col layout built from a strided window view and a
single tensordot per layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import LayerSpec, ModelGraph


class NonFiniteError(FloatingPointError):
    def __init__(self, layer_index: int, where: str = "activation"):
        super().__init__(f"non-finite {where} at layer {layer_index}")
        self.layer_index = layer_index


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C, Ho, Wo, k, k), no copy
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, weight, bias, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(x, weight.shape[2], stride)
    # (N, Ho, Wo, O)
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x.shape, cols)


def conv2d_backward(grad_out, weight, stride: int, padding: int, cache):
    xp_shape, cols = cache
    k = weight.shape[2]
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # (N, Ho, Wo, C, k, k)
    dcols = np.tensordot(grad_out, weight, axes=([1], [0]))
    dxp = np.zeros(xp_shape, dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, grad_w, grad_b


def maxpool_forward(x, k: int, stride: int, with_cache: bool = True):
    n, c, h, w = x.shape
    if k == stride and h % k == 0 and w % k == 0:
        if not with_cache:
            return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5)), None
        blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    else:
        blocks = _windows(x, k, stride)
        if not with_cache:
            return blocks.max(axis=(4, 5)), None
    flat = blocks.reshape(*blocks.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool_backward(grad_out, k: int, stride: int, cache):
    x_shape, arg = cache
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(
                hit, grad_out, 0
            )
    return dx


def _layer_forward(layer: LayerSpec, x: np.ndarray, with_cache: bool = True):
    kind = layer.kind
    if kind == "conv2d":
        return conv2d_forward(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if kind == "linear":
        out = x @ layer.weight.T
        if layer.bias is not None:
            out += layer.bias
        return out, x
    if kind == "relu":
        return np.maximum(x, 0), (x > 0 if with_cache else None)
    if kind == "maxpool2d":
        return maxpool_forward(x, layer.kernel_size, layer.stride, with_cache)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise ValueError(f"unknown layer kind {kind!r}")


def forward(graph: ModelGraph, x: np.ndarray, check_finite: bool = False, keep_cache: bool = False):
    """Logits for a batch ``x`` of shape (N, C, H, W).

    Returns ``logits`` or ``(logits, caches)`` when ``keep_cache`` is set.
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ValueError(f"input batch shape {x.shape} does not match model input {graph.input_shape}")
    caches: list[Any] = []
    for i, layer in enumerate(graph.layers):
        x, cache = _layer_forward(layer, x, keep_cache)
        if keep_cache:
            caches.append(cache)
        if check_finite and not np.all(np.isfinite(x)):
            raise NonFiniteError(i)
    return (x, caches) if keep_cache else x


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return softmax_cross_entropy(logits, labels)[0]


@dataclass
class Gradients:
    """Per-layer weight and bias gradients, keyed by layer index."""

    weight: dict[int, np.ndarray]
    bias: dict[int, np.ndarray]


def backward(graph: ModelGraph, caches: list[Any], grad_logits: np.ndarray) -> Gradients:
    """Backpropagate ``grad_logits``; masked weight positions get zero gradient."""
    gw: dict[int, np.ndarray] = {}
    gb: dict[int, np.ndarray] = {}
    g = grad_logits
    first_param = next((i for i, l in enumerate(graph.layers) if l.prunable), 0)
    for i in range(len(graph.layers) - 1, -1, -1):
        layer, cache = graph.layers[i], caches[i]
        kind = layer.kind
        if kind == "linear":
            gw[i] = g.T @ cache
            gb[i] = g.sum(axis=0)
            g = g @ layer.weight
        elif kind == "conv2d":
            if i == first_param:
                # input gradient is not needed below the first parameter layer
                _, cols = cache
                gw[i] = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
                gb[i] = g.sum(axis=(0, 2, 3))
            else:
                g, gw[i], gb[i] = conv2d_backward(g, layer.weight, layer.stride, layer.padding, cache)
        elif kind == "relu":
            g = g * cache
        elif kind == "maxpool2d":
            g = maxpool_backward(g, layer.kernel_size, layer.stride, cache)
        elif kind == "flatten":
            g = g.reshape(cache)
        if layer.mask is not None:
            gw[i] = np.where(layer.mask.dense, gw[i], 0).astype(gw[i].dtype)
        if i == first_param:
            break
    return Gradients(gw, gb)


def loss_and_grads(graph: ModelGraph, x: np.ndarray, labels: np.ndarray):
    logits, caches = forward(graph, x, keep_cache=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, logits, backward(graph, caches, dlogits)

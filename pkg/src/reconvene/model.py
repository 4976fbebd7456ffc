"""Sequential model IR: layers, sparsity masks and the invariant checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

LAYER_KINDS = ("conv2d", "linear", "relu", "maxpool2d", "flatten")
PRUNABLE_KINDS = ("conv2d", "linear")


def _frozen(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is None:
        return None
    arr = np.asarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SparsityMask:
    """One bit per weight element (1 = kept), packed LSB-first into bytes."""

    bits: np.ndarray
    shape: tuple[int, ...]
    nnz: int

    @classmethod
    def from_bool(cls, keep: np.ndarray) -> SparsityMask:
        keep = np.asarray(keep, dtype=bool)
        bits = np.packbits(keep.ravel(), bitorder="little")
        bits.flags.writeable = False
        return cls(bits=bits, shape=tuple(int(s) for s in keep.shape), nnz=int(keep.sum()))

    @classmethod
    def ones(cls, shape: Sequence[int]) -> SparsityMask:
        return cls.from_bool(np.ones(tuple(shape), dtype=bool))

    @cached_property
    def dense(self) -> np.ndarray:
        size = math.prod(self.shape)
        keep = np.unpackbits(self.bits, count=size, bitorder="little").astype(bool)
        keep = keep.reshape(self.shape)
        keep.flags.writeable = False
        return keep

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def popcount(self) -> int:
        return int(np.unpackbits(self.bits, count=self.size, bitorder="little").sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.nnz == other.nnz
            and self.bits.tobytes() == other.bits.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """A single layer of a sequential network.

    conv2d uses ``out_channels/in_channels/kernel_size/stride/padding``, linear
    uses ``out_features/in_features`` and maxpool2d uses ``kernel_size/stride``.
    ``weight`` and ``bias`` are numpy arrays (float32 by default; float64 is
    allowed for gradient checking).
    """

    kind: str
    out_channels: int | None = None
    in_channels: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    padding: int | None = None
    out_features: int | None = None
    in_features: int | None = None
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    mask: SparsityMask | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))

    # constructors -------------------------------------------------------
    @classmethod
    def conv2d(
        cls,
        out_channels: int,
        in_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        weight: np.ndarray | None = None,
        bias: np.ndarray | None = None,
        mask: SparsityMask | None = None,
        dtype=np.float32,
    ) -> LayerSpec:
        if weight is None:
            weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype)
        if bias is None:
            bias = np.zeros(out_channels, dtype=weight.dtype)
        return cls(
            "conv2d",
            out_channels=out_channels,
            in_channels=in_channels,
            kernel_size=kernel_size,
            stride=stride,
            padding=padding,
            weight=weight,
            bias=bias,
            mask=mask,
        )

    @classmethod
    def linear(
        cls,
        out_features: int,
        in_features: int,
        weight: np.ndarray | None = None,
        bias: np.ndarray | None = None,
        mask: SparsityMask | None = None,
        dtype=np.float32,
    ) -> LayerSpec:
        if weight is None:
            weight = np.zeros((out_features, in_features), dtype=dtype)
        if bias is None:
            bias = np.zeros(out_features, dtype=weight.dtype)
        return cls(
            "linear",
            out_features=out_features,
            in_features=in_features,
            weight=weight,
            bias=bias,
            mask=mask,
        )

    @classmethod
    def relu(cls) -> LayerSpec:
        return cls("relu")

    @classmethod
    def maxpool2d(cls, kernel_size: int = 2, stride: int | None = None) -> LayerSpec:
        return cls("maxpool2d", kernel_size=kernel_size, stride=stride or kernel_size)

    @classmethod
    def flatten(cls) -> LayerSpec:
        return cls("flatten")

    # properties ---------------------------------------------------------
    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS

    @property
    def n_out(self) -> int | None:
        """Output channels (conv2d) or output features (linear)."""
        return self.out_channels if self.kind == "conv2d" else self.out_features

    @property
    def n_in(self) -> int | None:
        return self.in_channels if self.kind == "conv2d" else self.in_features

    @property
    def fan_in(self) -> int:
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_size**2
        if self.kind == "linear":
            return self.in_features
        raise ValueError(f"{self.kind} layer has no fan-in")

    @property
    def declared_weight_shape(self) -> tuple[int, ...] | None:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        return None

    def masked_weight(self) -> np.ndarray:
        if self.mask is None:
            return self.weight
        return np.where(self.mask.dense, self.weight, 0).astype(self.weight.dtype)

    def with_(self, **changes) -> LayerSpec:
        return replace(self, **changes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayerSpec):
            return NotImplemented
        scalars = (
            "kind", "out_channels", "in_channels", "kernel_size", "stride",
            "padding", "out_features", "in_features",
        )
        if any(getattr(self, a) != getattr(other, a) for a in scalars):
            return False
        return (
            _arrays_identical(self.weight, other.weight)
            and _arrays_identical(self.bias, other.bias)
            and self.mask == other.mask
        )

    __hash__ = None  # type: ignore[assignment]


def _arrays_identical(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    class_count: int
    seed_provenance: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def __getitem__(self, i: int) -> LayerSpec:
        return self.layers[i]

    def prunable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv2d"]

    def with_layers(self, layers: Sequence[LayerSpec]) -> ModelGraph:
        return replace(self, layers=tuple(layers))

    def replace_layer(self, index: int, layer: LayerSpec) -> ModelGraph:
        layers = list(self.layers)
        layers[index] = layer
        return self.with_layers(layers)

    @property
    def is_dense(self) -> bool:
        return all(layer.mask is None for layer in self.layers)

    def astype(self, dtype) -> ModelGraph:
        layers = []
        for layer in self.layers:
            if layer.weight is None:
                layers.append(layer)
                continue
            layers.append(
                layer.with_(weight=layer.weight.astype(dtype), bias=layer.bias.astype(dtype))
            )
        return self.with_layers(layers)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (
            self.input_shape == other.input_shape
            and self.class_count == other.class_count
            and self.seed_provenance == other.seed_provenance
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )

    __hash__ = None  # type: ignore[assignment]


# --------------------------------------------------------------------------
# shape arithmetic


class ShapeError(ValueError):
    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape after ``layer`` for a single (unbatched) input of ``shape``.

    Only geometry is checked here; channel agreement is the caller's job.
    """
    kind = layer.kind
    if kind == "conv2d":
        if len(shape) != 3:
            raise ValueError("conv2d needs a (C, H, W) input")
        _, h, w = shape
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        return (layer.out_channels, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))
    if kind == "maxpool2d":
        if len(shape) != 3:
            raise ValueError("maxpool2d needs a (C, H, W) input")
        c, h, w = shape
        k, s = layer.kernel_size, layer.stride
        return (c, pool_output_size(h, k, s), pool_output_size(w, k, s))
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "linear":
        if len(shape) != 1:
            raise ValueError("linear layer needs flattened input")
        return (layer.out_features,)
    if kind == "relu":
        return shape
    raise ValueError(f"unknown layer kind {kind!r}")


def trace_shapes(graph: ModelGraph) -> list[tuple[int, ...]]:
    """Per-layer input shapes, followed by the final output shape.

    Raises ShapeError on the first inconsistency.
    """
    shape: tuple[int, ...] = graph.input_shape
    shapes = [shape]
    for i, layer in enumerate(graph.layers):
        if layer.kind == "conv2d" and shape[0] != layer.in_channels:
            raise ShapeError(i, f"expects {layer.in_channels} input channels, got {shape[0]}")
        if layer.kind == "linear" and len(shape) == 1 and shape[0] != layer.in_features:
            raise ShapeError(i, f"expects {layer.in_features} input features, got {shape[0]}")
        try:
            shape = output_shape(layer, shape)
        except ValueError as exc:
            raise ShapeError(i, str(exc)) from None
        if any(s < 1 for s in shape):
            raise ShapeError(i, f"output shape {shape} collapses")
        shapes.append(shape)
    return shapes


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    layer_index: int | None
    message: str

    def __str__(self) -> str:
        where = "model" if self.layer_index is None else f"layer {self.layer_index}"
        return f"{where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def _check_layer(i: int, layer: LayerSpec) -> list[Violation]:
    out: list[Violation] = []

    def bad(msg: str) -> None:
        out.append(Violation(i, msg))

    if layer.kind not in LAYER_KINDS:
        bad(f"unknown layer kind {layer.kind!r}")
        return out
    if not layer.prunable:
        if layer.mask is not None:
            bad("non-prunable layer carries a mask")
        if layer.weight is not None or layer.bias is not None:
            bad(f"{layer.kind} layer carries parameters")
        if layer.kind == "maxpool2d" and not (
            (layer.kernel_size or 0) >= 1 and (layer.stride or 0) >= 1
        ):
            bad("maxpool2d kernel_size and stride must be positive")
        return out

    dims = (
        (layer.out_channels, layer.in_channels, layer.kernel_size, layer.stride)
        if layer.kind == "conv2d"
        else (layer.out_features, layer.in_features)
    )
    if any(d is None or d < 1 for d in dims):
        bad("layer dimensions must be positive integers")
        return out
    if layer.kind == "conv2d" and (layer.padding is None or layer.padding < 0):
        bad("padding must be >= 0")
    if layer.weight is None:
        bad("missing weight tensor")
        return out
    declared = layer.declared_weight_shape
    if tuple(layer.weight.shape) != declared:
        bad(f"weight shape {tuple(layer.weight.shape)} != declared {declared}")
        return out
    if layer.weight.size != math.prod(declared):
        bad("weight element count does not match shape")
    if not np.all(np.isfinite(layer.weight)):
        bad("non-finite weight values")
    if layer.bias is not None and layer.bias.shape != (layer.n_out,):
        bad(f"bias length {layer.bias.shape} != {layer.n_out}")
    if layer.mask is not None:
        mask = layer.mask
        if mask.shape != declared:
            bad(f"mask shape {mask.shape} != weight shape {declared}")
        elif mask.popcount() != mask.nnz:
            bad("mask nnz does not match popcount")
        elif np.any(layer.weight[~mask.dense] != 0):
            bad("mask/weight inconsistency")
    return out


def validate(graph: ModelGraph) -> ValidationReport:
    """Check every IR invariant; violations are returned, never raised."""
    violations: list[Violation] = []
    if len(graph.input_shape) != 3 or any(s < 1 for s in graph.input_shape):
        violations.append(Violation(None, f"bad input_shape {graph.input_shape}"))
        return ValidationReport(tuple(violations))
    if graph.class_count < 1:
        violations.append(Violation(None, "class_count must be positive"))

    for i, layer in enumerate(graph.layers):
        violations.extend(_check_layer(i, layer))

    # boundary checks: walk the shapes, remembering the last parameter layer
    shape: tuple[int, ...] = graph.input_shape
    prev = None
    for i, layer in enumerate(graph.layers):
        if layer.kind not in LAYER_KINDS:
            return ValidationReport(tuple(violations))
        src = "input" if prev is None else str(prev)
        if layer.kind == "conv2d":
            if len(shape) != 3:
                violations.append(Violation(i, "conv2d after flatten"))
                break
            if layer.in_channels is not None and shape[0] != layer.in_channels:
                violations.append(Violation(i, f"channel mismatch at boundary {src}→{i}"))
            shape = (layer.in_channels or shape[0],) + shape[1:]
        elif layer.kind == "linear":
            if len(shape) != 1:
                violations.append(Violation(i, "linear layer requires flattened input"))
                break
            if shape[0] != layer.in_features:
                violations.append(Violation(i, f"feature mismatch at boundary {src}→{i}"))
            shape = (layer.in_features or shape[0],)
        elif layer.kind in ("maxpool2d",) and len(shape) != 3:
            violations.append(Violation(i, "maxpool2d after flatten"))
            break
        try:
            shape = output_shape(layer, shape)
        except (ValueError, TypeError) as exc:
            violations.append(Violation(i, str(exc)))
            break
        if any(s < 1 for s in shape):
            violations.append(Violation(i, f"spatial size collapses to {shape}"))
            break
        if layer.prunable:
            prev = i
    else:
        if shape != (graph.class_count,):
            violations.append(
                Violation(None, f"output shape {shape} != ({graph.class_count},)")
            )
    return ValidationReport(tuple(violations))


def param_counts(graph: ModelGraph) -> tuple[int, int]:
    """(total, nonzero) over prunable weight tensors; biases excluded.

    ``nonzero`` discounts only positions cleared by a mask, so an unmasked
    layer counts in full even if some initial weight happens to be 0.0.
    """
    total = 0
    nonzero = 0
    for layer in graph.layers:
        if not layer.prunable:
            continue
        total += layer.weight.size
        nonzero += layer.weight.size if layer.mask is None else layer.mask.nnz
    return total, nonzero

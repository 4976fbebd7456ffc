"""On-disk format for models and tensor bundles.

A file is a UTF-8 JSON manifest plus one binary blob.  The container form is::

    <u64 little-endian manifest length> <manifest bytes> <blob bytes>

and the sibling form is ``name.json`` + ``name.bin``.  Float tensors are
little-endian float32, masks are packed LSB-first bit arrays, integer
tensors little-endian int32.  Blob offsets in the manifest are relative to
the start of the blob.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .model import LayerSpec, ModelGraph, SparsityMask

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")

_SHAPE_FIELDS = {
    "conv2d": ("out_channels", "in_channels", "kernel_size", "stride", "padding"),
    "linear": ("out_features", "in_features"),
    "maxpool2d": ("kernel_size", "stride"),
    "relu": (),
    "flatten": (),
}

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4"), "bits": np.dtype("u1")}


class FormatError(ValueError):
    """Malformed manifest or blob."""


def _dumps(manifest: dict[str, Any]) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _BlobWriter:
    def __init__(self) -> None:
        self.parts: list[bytes] = []
        self.offset = 0

    def add(self, data: bytes) -> dict[str, int]:
        entry = {"offset": self.offset, "length": len(data)}
        self.parts.append(data)
        self.offset += len(data)
        return entry

    def reserve(self, length: int) -> dict[str, int]:
        entry = {"offset": self.offset, "length": length}
        self.offset += length
        return entry


# --------------------------------------------------------------------------
# models


def _model_manifest(graph: ModelGraph, blob: _BlobWriter, include_masks: bool, dry: bool) -> dict:
    layers = []
    for layer in graph.layers:
        entry: dict[str, Any] = {"kind": layer.kind}
        for name in _SHAPE_FIELDS[layer.kind]:
            entry[name] = getattr(layer, name)
        if layer.weight is not None:
            n = layer.weight.size * 4
            entry["weight"] = blob.reserve(n) if dry else blob.add(
                np.ascontiguousarray(layer.weight, dtype="<f4").tobytes()
            )
        if layer.bias is not None:
            n = layer.bias.size * 4
            entry["bias"] = blob.reserve(n) if dry else blob.add(
                np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()
            )
        if include_masks and layer.mask is not None:
            n = layer.mask.bits.size
            entry["mask"] = blob.reserve(n) if dry else blob.add(layer.mask.bits.tobytes())
            entry["mask"]["nnz"] = layer.mask.nnz
        layers.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "input_shape": list(graph.input_shape),
        "class_count": graph.class_count,
        "seed_provenance": int(graph.seed_provenance),
        "layers": layers,
    }


def encode_model(graph: ModelGraph, include_masks: bool = True) -> tuple[bytes, bytes]:
    """Return (manifest bytes, blob bytes)."""
    blob = _BlobWriter()
    manifest = _model_manifest(graph, blob, include_masks, dry=False)
    return _dumps(manifest), b"".join(blob.parts)


def storage_size(graph: ModelGraph, include_masks: bool = False) -> int:
    """Byte size of the container file, computed without materialising the blob.

    The default excludes masks: this is the deployable model (zeros are
    already stored in the weights), and it is the size compression ratios use.
    """
    blob = _BlobWriter()
    manifest = _model_manifest(graph, blob, include_masks, dry=True)
    return _LEN.size + len(_dumps(manifest)) + blob.offset


def _read_parts(path: str | os.PathLike) -> tuple[dict, bytes]:
    path = Path(path)
    if path.suffix == ".json" or (not path.exists() and path.with_suffix(".json").exists()):
        json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
        manifest_bytes = json_path.read_bytes()
        blob = bin_path.read_bytes()
    else:
        raw = path.read_bytes()
        if len(raw) < _LEN.size:
            raise FormatError(f"{path}: truncated container header")
        (n,) = _LEN.unpack_from(raw, 0)
        if _LEN.size + n > len(raw):
            raise FormatError(f"{path}: manifest length {n} exceeds file size")
        manifest_bytes = raw[_LEN.size : _LEN.size + n]
        blob = raw[_LEN.size + n :]
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported or missing format_version")
    return manifest, blob


def _write_parts(path: str | os.PathLike, manifest: bytes, blob: bytes, sidecar: bool) -> None:
    path = Path(path)
    if sidecar:
        path.with_suffix(".json").write_bytes(manifest)
        path.with_suffix(".bin").write_bytes(blob)
        return
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(manifest)))
        fh.write(manifest)
        fh.write(blob)


def _slice(blob: bytes, entry: dict, expected: int, what: str) -> bytes:
    try:
        off, length = int(entry["offset"]), int(entry["length"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{what}: bad blob reference {entry!r}") from None
    if length != expected:
        raise FormatError(f"{what}: blob length {length} != expected {expected}")
    if off < 0 or off + length > len(blob):
        raise FormatError(f"{what}: blob range [{off}, {off + length}) out of bounds")
    return blob[off : off + length]


def save_model(
    graph: ModelGraph,
    path: str | os.PathLike,
    include_masks: bool = True,
    sidecar: bool = False,
) -> None:
    manifest, blob = encode_model(graph, include_masks=include_masks)
    _write_parts(path, manifest, blob, sidecar)


def export_model(graph: ModelGraph, path: str | os.PathLike) -> None:
    """Write the deployable form (weights and biases only, no masks)."""
    save_model(graph, path, include_masks=False)


def decode_model(manifest: dict, blob: bytes) -> ModelGraph:
    if manifest.get("kind", "model") != "model":
        raise FormatError(f"expected a model manifest, got {manifest.get('kind')!r}")
    try:
        layer_entries = manifest["layers"]
        input_shape = tuple(int(s) for s in manifest["input_shape"])
        class_count = int(manifest["class_count"])
        seed = int(manifest.get("seed_provenance", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from None

    layers = []
    for i, entry in enumerate(layer_entries):
        kind = entry.get("kind")
        if kind not in _SHAPE_FIELDS:
            raise FormatError(f"layer {i}: unknown kind {kind!r}")
        try:
            dims = {name: int(entry[name]) for name in _SHAPE_FIELDS[kind]}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"layer {i}: missing shape field {exc}") from None
        layer = LayerSpec(kind, **dims)
        shape = layer.declared_weight_shape
        weight = bias = mask = None
        if "weight" in entry:
            if shape is None:
                raise FormatError(f"layer {i}: {kind} layer has a weight blob")
            n = math.prod(shape)
            raw = _slice(blob, entry["weight"], n * 4, f"layer {i} weight")
            weight = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        if "bias" in entry:
            n = layer.n_out
            raw = _slice(blob, entry["bias"], n * 4, f"layer {i} bias")
            bias = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if "mask" in entry:
            if shape is None:
                raise FormatError(f"layer {i}: {kind} layer has a mask blob")
            n = (math.prod(shape) + 7) // 8
            raw = _slice(blob, entry["mask"], n, f"layer {i} mask")
            bits = np.frombuffer(raw, dtype=np.uint8).copy()
            bits.flags.writeable = False
            mask = SparsityMask(bits=bits, shape=shape, nnz=int(entry["mask"].get("nnz", -1)))
            if mask.nnz != mask.popcount():
                raise FormatError(f"layer {i}: mask nnz does not match popcount")
        layers.append(layer.with_(weight=weight, bias=bias, mask=mask))
    return ModelGraph(tuple(layers), input_shape, class_count, seed)


def load_model(path: str | os.PathLike) -> ModelGraph:
    manifest, blob = _read_parts(path)
    return decode_model(manifest, blob)


# --------------------------------------------------------------------------
# generic tensor bundles (datasets)


def save_tensors(
    path: str | os.PathLike,
    tensors: dict[str, np.ndarray],
    meta: dict[str, Any] | None = None,
    kind: str = "tensors",
    sidecar: bool = False,
) -> None:
    """Write named tensors; float arrays become f32, integer arrays i32."""
    blob = _BlobWriter()
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            code = "f32"
        elif np.issubdtype(arr.dtype, np.integer):
            code = "i32"
        else:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entry = {"name": name, "dtype": code, "shape": list(arr.shape)}
        entry.update(blob.add(data))
        entries.append(entry)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "tensors": entries}
    manifest.update(meta or {})
    _write_parts(path, _dumps(manifest), b"".join(blob.parts), sidecar)


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest, blob = _read_parts(path)
    out = {}
    for entry in manifest.get("tensors", []):
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad tensor entry: {exc}") from None
        raw = _slice(blob, entry, math.prod(shape) * dtype.itemsize, f"tensor {entry['name']}")
        native = np.float32 if dtype.kind == "f" else np.int32
        out[entry["name"]] = np.frombuffer(raw, dtype=dtype).astype(native).reshape(shape)
    return out, manifest


def model_bytes(graph: ModelGraph, include_masks: bool = True) -> bytes:
    """The complete container file as bytes."""
    manifest, blob = encode_model(graph, include_masks=include_masks)
    buf = io.BytesIO()
    buf.write(_LEN.pack(len(manifest)))
    buf.write(manifest)
    buf.write(blob)
    return buf.getvalue()

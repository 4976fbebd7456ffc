"""Datasets: a seeded synthetic image task and the tensor-file loader."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .init import STREAM_DATA, stream
from .serialize import FormatError, load_tensors, save_tensors


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int
    class_count: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be (N, C, H, W), got {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])


def _render(centers, colors, widths, amps, grid_y, grid_x):
    # centers (N, B, 2), colors (N, B, C), widths (N, B), amps (N, B) -> (N, C, H, W)
    dy = grid_y[None, None] - centers[..., 0, None, None]
    dx = grid_x[None, None] - centers[..., 1, None, None]
    bump = np.exp(-(dy**2 + dx**2) / (2 * widths[..., None, None] ** 2)) * amps[..., None, None]
    return np.einsum("nbhw,nbc->nchw", bump, colors)


def gaussian_blobs(
    n: int,
    class_count: int = 10,
    shape: tuple[int, int, int] = (3, 16, 16),
    seed: int = 0,
    blobs_per_class: int = 3,
    jitter: float = 1.5,
    noise: float = 0.35,
    split: str = "train",
) -> Dataset:
    """Images made of coloured Gaussian bumps.

    Each class owns ``blobs_per_class`` bumps with fixed nominal positions,
    colours and widths.  A sample perturbs positions by ``jitter`` pixels
    (std), scales each bump's amplitude, and adds pixel noise.  Class
    prototypes depend only on ``seed``; the split picks a disjoint sample
    stream, so train and test share the same classes.
    """
    c, h, w = shape
    proto = stream(seed, STREAM_DATA, 0)
    pos = proto.uniform([2, 2], [h - 3, w - 3], size=(class_count, blobs_per_class, 2))
    col = proto.normal(size=(class_count, blobs_per_class, c))
    col /= np.linalg.norm(col, axis=-1, keepdims=True)
    wid = proto.uniform(1.0, 2.5, size=(class_count, blobs_per_class))

    rng = stream(seed, STREAM_DATA, 1 if split == "train" else 2)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    centers = pos[labels] + rng.normal(scale=jitter, size=(n, blobs_per_class, 2))
    amps = rng.uniform(0.6, 1.4, size=(n, blobs_per_class))
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    x = _render(centers, col[labels], wid[labels], amps, grid_y, grid_x)
    x += rng.normal(scale=noise, size=x.shape)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), class_count, split)


def synthetic_splits(
    n_train: int = 5000, n_test: int = 1000, seed: int = 0, **kwargs
) -> tuple[Dataset, Dataset]:
    train = gaussian_blobs(n_train, seed=seed, split="train", **kwargs)
    test = gaussian_blobs(n_test, seed=seed, split="test", **kwargs)
    return train, test


def save_dataset(dataset: Dataset, path: str | os.PathLike, sidecar: bool = False) -> None:
    save_tensors(
        path,
        {"inputs": dataset.inputs, "labels": dataset.labels.astype(np.int32)},
        meta={"class_count": dataset.class_count, "split": dataset.split},
        kind="dataset",
        sidecar=sidecar,
    )


def load_dataset(path: str | os.PathLike) -> Dataset:
    tensors, manifest = load_tensors(path)
    if "inputs" not in tensors or "labels" not in tensors:
        raise FormatError(f"{path}: dataset needs 'inputs' and 'labels' tensors")
    labels = tensors["labels"].astype(np.int64)
    class_count = int(manifest.get("class_count", int(labels.max()) + 1 if len(labels) else 1))
    return Dataset(tensors["inputs"], labels, class_count, manifest.get("split", "train"))

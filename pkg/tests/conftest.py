from __future__ import annotations

import numpy as np
import pytest

from reconvene.model import LayerSpec, ModelGraph, SparsityMask


def make_toy(seed: int = 0, dtype=np.float32) -> ModelGraph:
    """conv(3->4) relu conv(4->8) relu pool flatten linear(8*4*4 -> 5), input 3x8x8."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec.conv2d(4, 3, 3, padding=1, weight=rng.normal(size=(4, 3, 3, 3)).astype(dtype),
                         bias=rng.normal(size=4).astype(dtype)),
        LayerSpec.relu(),
        LayerSpec.conv2d(8, 4, 3, padding=1, weight=rng.normal(size=(8, 4, 3, 3)).astype(dtype),
                         bias=rng.normal(size=8).astype(dtype)),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2),
        LayerSpec.flatten(),
        LayerSpec.linear(5, 8 * 4 * 4, weight=rng.normal(size=(5, 128)).astype(dtype) * 0.1,
                         bias=np.zeros(5, dtype)),
    ]
    return ModelGraph(tuple(layers), (3, 8, 8), 5, seed_provenance=seed)


def random_sequential(rng: np.random.Generator, n_conv: int | None = None) -> ModelGraph:
    """Random sequential conv net with 3-8 conv layers and one linear head."""
    n_conv = n_conv or int(rng.integers(3, 9))
    c = int(rng.integers(1, 4))
    size = int(rng.choice([4, 8]))
    shape = (c, size, size)
    layers = []
    pools_left = 2 if size == 8 else 1
    for _ in range(n_conv):
        out = int(rng.integers(2, 17))
        k = int(rng.choice([1, 3]))
        w = rng.normal(scale=np.sqrt(2 / (c * k * k)), size=(out, c, k, k)).astype(np.float32)
        layers += [LayerSpec.conv2d(out, c, k, padding=k // 2, weight=w), LayerSpec.relu()]
        c = out
        if pools_left and rng.random() < 0.4:
            layers.append(LayerSpec.maxpool2d(2))
            size //= 2
            pools_left -= 1
    classes = int(rng.integers(2, 6))
    w = rng.normal(scale=np.sqrt(2 / (c * size * size)), size=(classes, c * size * size))
    layers += [LayerSpec.flatten(), LayerSpec.linear(classes, c * size * size, weight=w.astype(np.float32))]
    return ModelGraph(tuple(layers), shape, classes, seed_provenance=int(rng.integers(2**63)))


def mask_layer(layer: LayerSpec, keep: np.ndarray) -> LayerSpec:
    keep = np.asarray(keep, dtype=bool).reshape(layer.weight.shape)
    return layer.with_(weight=np.where(keep, layer.weight, 0).astype(layer.weight.dtype),
                       mask=SparsityMask.from_bool(keep))


@pytest.fixture
def toy() -> ModelGraph:
    return make_toy()


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)

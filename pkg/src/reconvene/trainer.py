"""Deterministic mini-batch SGD training with masked updates."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .init import STREAM_SHUFFLE, stream
from .model import ModelGraph
from .nn import Gradients, NonFiniteError, cross_entropy, forward, loss_and_grads

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite training loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and (ms[0] < 0 or ms[-1] >= max(self.epochs, 1)):
            raise ValueError("milestones must lie in [0, epochs)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Base LR times gamma for every milestone already reached."""
    drops = sum(1 for m in config.milestones if m <= epoch)
    return config.lr * config.gamma**drops


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    return cross_entropy(logits, labels)


def backward(graph: ModelGraph, batch: np.ndarray, labels: np.ndarray) -> Gradients:
    """Gradients of the mean loss on ``batch``; masked positions are 0."""
    return loss_and_grads(graph, batch, labels)[2]


class SGD:
    """SGD with momentum and L2 weight decay.

    v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v.
    Masked positions are re-zeroed after every step.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def _update(self, key, w, g, lr):
        cfg = self.config
        d = g + cfg.weight_decay * w if cfg.weight_decay else g
        v = self.velocity.get(key)
        v = d if v is None or cfg.momentum == 0 else cfg.momentum * v + d
        self.velocity[key] = v
        return (w - lr * v).astype(w.dtype)

    def step(self, graph: ModelGraph, grads: Gradients, epoch: int) -> ModelGraph:
        lr = lr_at(self.config, epoch)
        layers = list(graph.layers)
        for i, gw in grads.weight.items():
            layer = layers[i]
            w = self._update((i, "weight"), layer.weight, gw, lr)
            if layer.mask is not None:
                w = np.where(layer.mask.dense, w, 0).astype(w.dtype)
            changes = {"weight": w}
            if layer.bias is not None and i in grads.bias:
                changes["bias"] = self._update((i, "bias"), layer.bias, grads.bias[i], lr)
            layers[i] = layer.with_(**changes)
        return graph.with_layers(layers)


def sgd_step(
    graph: ModelGraph, gradients: Gradients, config: TrainConfig, epoch: int, optimizer: SGD | None = None
) -> ModelGraph:
    """One update; pass the same ``optimizer`` across calls to carry momentum."""
    return (optimizer or SGD(config)).step(graph, gradients, epoch)


def predict(graph: ModelGraph, inputs: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [forward(graph, inputs[i : i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, graph.class_count))


def evaluate(graph: ModelGraph, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(dataset) == 0:
        return 0.0
    pred = predict(graph, dataset.inputs, batch_size).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float
    wall_ms: float


@dataclass
class TrainResult:
    final: ModelGraph
    best: ModelGraph
    best_acc: float
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def final_acc(self) -> float:
        return self.history[-1].test_acc if self.history else self.best_acc

    def history_jsonl(self, timing: bool = True) -> str:
        lines = []
        for rec in self.history:
            d = asdict(rec)
            if not timing:
                d.pop("wall_ms")
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def train(
    graph: ModelGraph,
    train_set: Dataset,
    test_set: Dataset,
    config: TrainConfig,
    dtype=np.float32,
) -> TrainResult:
    """Train for ``config.epochs``; data order per epoch comes from (seed, epoch)."""
    graph = graph.astype(dtype)
    opt = SGD(config)
    x_all = train_set.inputs.astype(dtype, copy=False)
    y_all = train_set.labels
    best, best_acc = graph, evaluate(graph, test_set)
    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = stream(config.seed, STREAM_SHUFFLE, epoch).permutation(len(y_all))
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                loss, _, grads = loss_and_grads(graph, x_all[idx], y_all[idx])
            except FloatingPointError:
                raise DivergenceError(epoch, step) from None
            if not np.isfinite(loss):
                raise DivergenceError(epoch, step)
            graph = opt.step(graph, grads, epoch)
            total += loss * len(idx)
            seen += len(idx)
        acc = evaluate(graph, test_set)
        rec = EpochRecord(epoch, lr_at(config, epoch), total / max(seen, 1), acc,
                          (time.perf_counter() - t0) * 1e3)
        history.append(rec)
        log.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, rec.lr, rec.train_loss, acc)
        if acc > best_acc:
            best, best_acc = graph, acc
    return TrainResult(final=graph, best=best, best_acc=best_acc, history=history)


def masked_violations(graph: ModelGraph) -> int:
    """Count masked positions holding a nonzero weight."""
    return sum(
        int(np.count_nonzero(layer.weight[~layer.mask.dense]))
        for layer in graph.layers
        if layer.mask is not None
    )


def parse_milestones(text: str | Sequence[int] | None) -> tuple[int, ...]:
    if text is None or text == "":
        return ()
    if isinstance(text, str):
        return tuple(int(t) for t in text.split(",") if t.strip())
    return tuple(int(t) for t in text)


__all__ = [
    "DivergenceError",
    "NonFiniteError",
    "SGD",
    "TrainConfig",
    "TrainResult",
    "backward",
    "evaluate",
    "loss",
    "lr_at",
    "sgd_step",
    "train",
]

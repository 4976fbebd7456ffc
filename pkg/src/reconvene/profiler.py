"""Static and timed profiling of models, and dense-vs-pruned comparison."""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .init import STREAM_PROFILE, stream
from .model import ModelGraph, output_shape, param_counts
from .nn import forward
from .serialize import storage_size

FORMAT_VERSION = 1


def layer_flops(graph: ModelGraph) -> list[int]:
    """Per-layer FLOPs for one sample, counted as 2 x multiply-accumulates.

    Pooling, activations and bias additions are not counted.
    """
    shape: tuple[int, ...] = graph.input_shape
    flops = []
    for layer in graph.layers:
        out = output_shape(layer, shape)
        if layer.kind == "conv2d":
            _, ho, wo = out
            f = 2 * layer.kernel_size**2 * layer.in_channels * layer.out_channels * ho * wo
        elif layer.kind == "linear":
            f = 2 * layer.in_features * layer.out_features
        else:
            f = 0
        flops.append(f)
        shape = out
    return flops


def count_flops(graph: ModelGraph) -> int:
    return sum(layer_flops(graph))


def timing_threads() -> int:
    """Worker cap from RECONVENE_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("RECONVENE_THREADS", "1")))
    except ValueError:
        return 1


def peak_rss_bytes() -> int | None:
    """Peak resident set size of this process, best effort."""
    try:
        import resource
    except ImportError:  # pragma: no cover - non-POSIX
        return None
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # Linux reports kilobytes, macOS bytes
    return int(rss) if os.uname().sysname == "Darwin" else int(rss) * 1024


@dataclass
class ProfileReport:
    param_total: int
    param_nonzero: int
    storage_bytes: int
    flops: int
    latency_samples_ms: list[float] = field(default_factory=list)
    latency_mean_ms: float | None = None
    latency_std_ms: float | None = None
    latency_median_ms: float | None = None
    input_shape: tuple[int, int, int] = (0, 0, 0)
    batch_size: int = 1
    threads: int = 1

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["format_version"] = FORMAT_VERSION
        if not timing:
            for k in ("latency_samples_ms", "latency_mean_ms", "latency_std_ms", "latency_median_ms"):
                d.pop(k)
        return d


def static_profile(graph: ModelGraph, batch: int = 1) -> ProfileReport:
    total, nonzero = param_counts(graph)
    return ProfileReport(
        param_total=total,
        param_nonzero=nonzero,
        storage_bytes=storage_size(graph),
        flops=count_flops(graph),
        input_shape=graph.input_shape,
        batch_size=batch,
    )


def profile(
    graph: ModelGraph,
    batch: int = 1,
    warmup: int = 5,
    samples: int = 30,
    seed: int = 0,
    threads: int | None = None,
) -> ProfileReport:
    """Static metrics plus wall-clock forward latency on a synthetic batch.

    ``samples=0`` skips timing.  Timed passes run with BLAS capped to
    ``threads`` (default RECONVENE_THREADS, i.e. single-threaded).
    """
    if samples < 0 or warmup < 0 or batch < 1:
        raise ValueError("batch must be >= 1 and warmup/samples >= 0")
    report = static_profile(graph, batch)
    if samples == 0:
        return report
    threads = threads or timing_threads()
    x = stream(seed, STREAM_PROFILE).standard_normal((batch, *graph.input_shape), dtype=np.float32)
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            forward(graph, x)
        for _ in range(samples):
            t0 = time.perf_counter()
            forward(graph, x)
            times.append((time.perf_counter() - t0) * 1e3)
    report.latency_samples_ms = times
    report.latency_mean_ms = statistics.fmean(times)
    report.latency_std_ms = statistics.pstdev(times)
    report.latency_median_ms = statistics.median(times)
    report.threads = threads
    return report


@dataclass
class ComparisonReport:
    compression: float
    speedup: float | None = None
    flops_ratio: float | None = None
    accuracy_delta: float | None = None

    def __post_init__(self) -> None:
        if self.compression <= 0 or (self.speedup is not None and self.speedup <= 0):
            raise ValueError("ratios must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d


def compare(
    dense: ProfileReport,
    pruned: ProfileReport,
    acc_dense: float | None = None,
    acc_pruned: float | None = None,
) -> ComparisonReport:
    if tuple(dense.input_shape) != tuple(pruned.input_shape) or dense.batch_size != pruned.batch_size:
        raise ValueError("profiles were taken with different input shapes or batch sizes")
    speedup = None
    if dense.latency_mean_ms is not None and pruned.latency_mean_ms is not None:
        speedup = dense.latency_mean_ms / pruned.latency_mean_ms
    delta = None
    if acc_dense is not None and acc_pruned is not None:
        delta = acc_pruned - acc_dense
    return ComparisonReport(
        compression=dense.storage_bytes / pruned.storage_bytes,
        speedup=speedup,
        flops_ratio=dense.flops / pruned.flops if pruned.flops else None,
        accuracy_delta=delta,
    )

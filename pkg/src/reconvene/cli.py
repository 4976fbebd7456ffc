"""Command-line entry point: ``reconvene <command> [flags]``.

Exit codes: 0 success, 1 invalid flags, 2 I/O or file-format error,
3 model validation failure.  Messages go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .data import load_dataset, save_dataset, synthetic_splits
from .model import ModelGraph, param_counts, validate
from .pipeline import prune_model
from .presets import PRESETS, build_preset
from .profiler import compare, peak_rss_bytes, profile
from .pruner import POLICIES, PruneConfig
from .serialize import FormatError, load_model, save_model
from .trainer import TrainConfig, parse_milestones, train

EXIT_OK, EXIT_FLAGS, EXIT_IO, EXIT_INVALID = 0, 1, 2, 3

log = logging.getLogger("reconvene")


class FlagError(Exception):
    """A flag value is malformed or out of range."""


class ModelInvalid(Exception):
    """An input model failed structural validation."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise FlagError(message)


# ---------------------------------------------------------------- flag helpers


def _sparsities(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise FlagError(f"--sparsity: not a number or comma-separated list: {text!r}") from None
    if not values:
        raise FlagError("--sparsity: no values given")
    for p in values:
        if not 0.0 <= p < 1.0:
            raise FlagError(f"--sparsity: {p} is outside [0, 1)")
    return values


def _nonneg(name: str, value: int) -> int:
    if value < 0:
        raise FlagError(f"{name}: must be >= 0, got {value}")
    return value


def _positive(name: str, value: int) -> int:
    if value < 1:
        raise FlagError(f"{name}: must be >= 1, got {value}")
    return value


def _train_config(args: argparse.Namespace) -> TrainConfig:
    try:
        milestones = parse_milestones(args.milestones)
    except ValueError:
        raise FlagError(f"--milestones: expected comma-separated integers, got {args.milestones!r}") from None
    if args.lr <= 0:
        raise FlagError(f"--lr: must be > 0, got {args.lr}")
    try:
        return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, milestones=milestones,
                           gamma=args.gamma, momentum=args.momentum, weight_decay=args.weight_decay,
                           seed=args.seed)
    except ValueError as err:
        raise FlagError(f"training flags: {err}") from None


def _resolved(args: argparse.Namespace) -> dict[str, Any]:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    return cfg


def _load(path: str) -> ModelGraph:
    graph = load_model(path)
    report = validate(graph)
    if not report.ok:
        raise ModelInvalid(f"{path}: " + "; ".join(report.messages()))
    return graph


def _write_json(path: str | os.PathLike, payload: Any) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sweep_path(path: str, p: float, sweep: bool) -> str:
    """Per-sparsity artifact name when several sparsities are requested."""
    if not sweep:
        return path
    base, ext = os.path.splitext(path)
    return f"{base}-p{p:g}{ext}"


def _default_sidecar(out: str, suffix: str) -> str:
    return os.path.splitext(out)[0] + suffix


def _timing_block(started: float) -> dict[str, Any]:
    return {"wall_s": time.perf_counter() - started, "peak_rss_bytes": peak_rss_bytes()}


# ---------------------------------------------------------------- commands


def cmd_genmodel(args: argparse.Namespace) -> int:
    if args.classes is not None:
        _positive("--classes", args.classes)
    graph = build_preset(args.preset, seed=args.seed, class_count=args.classes)
    save_model(graph, args.out)
    total, _ = param_counts(graph)
    print(f"preset={args.preset} seed={args.seed} params={total} out={args.out}")
    return EXIT_OK


def cmd_gendata(args: argparse.Namespace) -> int:
    _positive("--n-train", args.n_train)
    _positive("--n-test", args.n_test)
    _positive("--classes", args.classes)
    shape = {k: v for k, v in (("jitter", args.jitter), ("noise", args.noise)) if v is not None}
    train_set, test_set = synthetic_splits(args.n_train, args.n_test, seed=args.seed, class_count=args.classes,
                                           **shape)
    save_dataset(train_set, args.train_out)
    save_dataset(test_set, args.test_out)
    print(f"train={args.train_out} ({len(train_set)}) test={args.test_out} ({len(test_set)})")
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    sparsities = _sparsities(args.sparsity)
    _nonneg("--latency-samples", args.latency_samples)
    dense = _load(args.model)
    sweep = len(sparsities) > 1
    dense_prof = profile(dense, batch=args.profile_batch, samples=args.latency_samples, warmup=args.warmup,
                         seed=args.seed)
    for p in sparsities:
        started = time.perf_counter()
        config = PruneConfig(p, seed=args.seed, policy=args.policy, reinit=not args.no_reinit,
                             random_mode=args.random_mode, include_linear_in_avg=not args.conv_only_avg)
        result = prune_model(dense, config)
        search = _timing_block(started)
        report = validate(result.pruned)
        if not report.ok:
            raise ModelInvalid("pruned model failed validation: " + "; ".join(report.messages()))
        pruned_prof = profile(result.pruned, batch=args.profile_batch, samples=args.latency_samples,
                              warmup=args.warmup, seed=args.seed)
        cmp = compare(dense_prof, pruned_prof)

        out = _sweep_path(args.out, p, sweep)
        plan_path = _sweep_path(args.plan, p, sweep) if args.plan else _default_sidecar(out, ".plan.json")
        report_path = _sweep_path(args.report, p, sweep) if args.report else _default_sidecar(out, ".report.json")
        save_model(result.pruned, out)
        _write_json(plan_path, result.plan.to_dict())
        payload = {
            "format_version": 1,
            "config": {**_resolved(args), "sparsity": p},
            "comparison": cmp.to_dict(),
            "dense": dense_prof.to_dict(timing=args.latency_samples > 0),
            "pruned": pruned_prof.to_dict(timing=args.latency_samples > 0),
            "plan": plan_path,
        }
        if not args.no_timing:
            payload["timing"] = search
        _write_json(report_path, payload)
        print(f"policy={args.policy} sparsity={p:g} compression={cmp.compression:.4f} "
              f"params={pruned_prof.param_nonzero}")
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    _positive("--batch", args.batch)
    _nonneg("--warmup", args.warmup)
    _nonneg("--samples", args.samples)
    graph = _load(args.model)
    rep = profile(graph, batch=args.batch, warmup=args.warmup, samples=args.samples, seed=args.seed)
    payload = {"format_version": 1, "config": _resolved(args), "profile": rep.to_dict()}
    if not args.no_timing:
        payload["peak_rss_bytes"] = peak_rss_bytes()
    if args.report:
        _write_json(args.report, payload)
    line = f"params={rep.param_total} nonzero={rep.param_nonzero} bytes={rep.storage_bytes} flops={rep.flops}"
    if rep.latency_mean_ms is not None:
        line += f" latency_ms={rep.latency_mean_ms:.3f}±{rep.latency_std_ms:.3f}"
    print(line)
    return EXIT_OK


def _datasets(args: argparse.Namespace):
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test_data) if args.test_data else train_set
    return train_set, test_set


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    graph = _load(args.model)
    train_set, test_set = _datasets(args)
    if train_set.sample_shape != graph.input_shape:
        raise ModelInvalid(f"dataset samples {train_set.sample_shape} do not fit model input {graph.input_shape}")
    result = train(graph, train_set, test_set, config)
    if args.history:
        Path(args.history).write_text(result.history_jsonl(timing=not args.no_timing))
    if args.out:
        save_model(result.best if args.keep_best else result.final, args.out)
    print(f"epochs={config.epochs} final_acc={result.final_acc:.4f} best_acc={result.best_acc:.4f}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    sparsities = _sparsities(args.sparsity)
    _nonneg("--latency-samples", args.latency_samples)
    policies = args.policies.split(",") if args.policies else list(POLICIES)
    for name in policies:
        if name not in POLICIES:
            raise FlagError(f"--policies: unknown policy {name!r}; choose from {list(POLICIES)}")
    training = args.data is not None
    tcfg = _train_config(args) if training else None
    dense = _load(args.model)
    data = _datasets(args) if training else None

    dense_prof = profile(dense, batch=args.profile_batch, samples=args.latency_samples, warmup=args.warmup, seed=args.seed)
    dense_acc = train(dense, *data, tcfg).final_acc if training else None
    rows = []
    for p in sparsities:
        for name in sorted(policies):
            config = PruneConfig(p, seed=args.seed, policy=name, random_mode=args.random_mode)
            result = prune_model(dense, config)
            prof = profile(result.pruned, batch=args.profile_batch, samples=args.latency_samples,
                           warmup=args.warmup, seed=args.seed)
            acc = train(result.pruned, *data, tcfg).final_acc if training else None
            cmp = compare(dense_prof, prof, dense_acc, acc)
            rows.append({
                "policy": name,
                "sparsity": p,
                "compression": cmp.compression,
                "flops_ratio": cmp.flops_ratio,
                "speedup": cmp.speedup,
                "accuracy": acc,
                "accuracy_delta": cmp.accuracy_delta,
                "params": prof.param_nonzero,
                "storage_bytes": prof.storage_bytes,
                "resilient_layers": list(result.plan.resilient),
            })
            log.info("%s p=%g compression=%.3f acc=%s", name, p, cmp.compression, acc)
    payload = {"format_version": 1, "config": _resolved(args),
               "dense": {"accuracy": dense_acc, **dense_prof.to_dict(timing=args.latency_samples > 0)},
               "rows": rows}
    if not args.no_timing:
        payload["peak_rss_bytes"] = peak_rss_bytes()
    if args.report:
        _write_json(args.report, payload)
    for r in rows:
        acc = "" if r["accuracy"] is None else f" accuracy={r['accuracy']:.4f}"
        print(f"policy={r['policy']} sparsity={r['sparsity']:g} compression={r['compression']:.4f} "
              f"params={r['params']}{acc}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_training_flags(p: argparse.ArgumentParser, required_data: bool) -> None:
    p.add_argument("--data", required=required_data, help="training dataset file")
    p.add_argument("--test-data", help="test dataset file (default: the training set)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--milestones", default="", help="comma-separated epochs at which the LR drops")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=64)


def _add_prune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="dense model file (.rcv)")
    p.add_argument("--sparsity", required=True, help="p in [0,1), or a comma-separated sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-mode", choices=("matched", "coin"), default="matched")
    p.add_argument("--latency-samples", type=int, default=0, help="timed forward passes (0 skips timing)")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--profile-batch", type=int, default=1, help="batch size for latency profiling")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock and memory fields from reports")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reconvene", description="Structured pruning at initialisation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prune", help="prune a dense model and write model, plan and report")
    _add_prune_flags(p)
    p.add_argument("--policy", choices=POLICIES, default="reconvene")
    p.add_argument("--no-reinit", action="store_true", help="keep surviving weights instead of re-sampling")
    p.add_argument("--conv-only-avg", action="store_true", help="exclude linear layers from the average sparsity")
    p.add_argument("--out", required=True, help="pruned model file")
    p.add_argument("--plan", help="plan JSON (default: <out>.plan.json)")
    p.add_argument("--report", help="comparison report JSON (default: <out>.report.json)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("profile", help="static metrics and forward latency of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--samples", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--no-timing", action="store_true", help="omit memory fields from the report")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", help="train a (pruned) model with masked SGD")
    p.add_argument("--model", required=True)
    _add_training_flags(p, required_data=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="JSON-lines file with one record per epoch")
    p.add_argument("--out", help="write the trained model here")
    p.add_argument("--keep-best", action="store_true", help="write the best-accuracy checkpoint instead of the last")
    p.add_argument("--no-timing", action="store_true", help="omit wall_ms from the history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="run every policy on one model and tabulate the results")
    _add_prune_flags(p)
    p.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICIES)}")
    _add_training_flags(p, required_data=False)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("genmodel", help="write a seeded Kaiming-initialised preset model")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genmodel)

    p = sub.add_parser("gendata", help="write a synthetic Gaussian-blob dataset (train and test files)")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.set_defaults(func=cmd_gendata)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except FlagError as err:
        print(f"reconvene: error: {err}", file=sys.stderr)
        return EXIT_FLAGS
    except ModelInvalid as err:
        print(f"reconvene: invalid model: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, FormatError) as err:
        print(f"reconvene: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # structural problems surfaced while decoding or rectifying a model
        print(f"reconvene: invalid model: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

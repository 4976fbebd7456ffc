import json

import numpy as np
import pytest

from reconvene.cli import main
from reconvene.model import validate
from reconvene.serialize import load_model, save_model
from reconvene.sensitivity import PrunePlan


@pytest.fixture
def toy_model(tmp_path):
    path = tmp_path / "m.rcv"
    assert main(["genmodel", "--preset", "toy4", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_genmodel_is_idempotent(tmp_path):
    a, b = tmp_path / "a.rcv", tmp_path / "b.rcv"
    for p in (a, b):
        assert main(["genmodel", "--preset", "toy4", "--seed", "5", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert validate(load_model(a)).ok


def test_prune_writes_three_artifacts(toy_model, tmp_path, capsys):
    out, report = tmp_path / "m95.rcv", tmp_path / "r.json"
    code = main(["prune", "--model", str(toy_model), "--sparsity", "0.95", "--policy", "reconvene",
                 "--seed", "7", "--out", str(out), "--report", str(report)])
    assert code == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("policy=reconvene sparsity=0.95 compression=") and " params=" in line
    plan = PrunePlan.from_dict(json.loads((tmp_path / "m95.plan.json").read_text()))
    rep = json.loads(report.read_text())
    assert rep["config"]["seed"] == 7 and rep["config"]["policy"] == "reconvene"
    assert rep["config"]["latency_samples"] == 0 and "peak_rss_bytes" in rep["timing"]
    pruned = load_model(out)
    assert validate(pruned).ok
    assert rep["comparison"]["compression"] == pytest.approx(
        rep["dense"]["storage_bytes"] / rep["pruned"]["storage_bytes"])
    assert {e.layer: e.channels_after for e in plan.entries} == {
        i: pruned[i].n_out for i in pruned.prunable_indices()}


def test_prune_is_idempotent(toy_model, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.rcv"
        args = ["prune", "--model", str(toy_model), "--sparsity", "0.9", "--seed", "1", "--out", str(out),
                "--no-timing"]
        assert main(args) == 0
        outs.append((out.read_bytes(), (tmp_path / f"{name}.plan.json").read_bytes(),
                     (tmp_path / f"{name}.report.json").read_text().replace(f"{name}.", "X.")))
    assert outs[0] == outs[1]


def test_prune_identity_pipeline(toy_model, tmp_path):
    out = tmp_path / "same.rcv"
    assert main(["prune", "--model", str(toy_model), "--sparsity", "0", "--policy", "reconvene",
                 "--no-reinit", "--out", str(out)]) == 0
    a, b = load_model(toy_model), load_model(out)
    for la, lb in zip(a.layers, b.layers):
        if la.weight is not None:
            assert la.weight.tobytes() == lb.weight.tobytes()
            assert la.bias.tobytes() == lb.bias.tobytes()


def test_sparsity_sweep(toy_model, tmp_path, capsys):
    out = tmp_path / "s.rcv"
    assert main(["prune", "--model", str(toy_model), "--sparsity", "0.5,0.9", "--out", str(out)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 2
    for p in ("0.5", "0.9"):
        assert (tmp_path / f"s-p{p}.rcv").exists()
        assert (tmp_path / f"s-p{p}.plan.json").exists()
        assert (tmp_path / f"s-p{p}.report.json").exists()


@pytest.mark.parametrize("flags, needle", [
    (["--sparsity", "1.5"], "--sparsity"),
    (["--sparsity", "-0.1"], "--sparsity"),
    (["--sparsity", "abc"], "--sparsity"),
    (["--sparsity", "0.5", "--policy", "nope"], "--policy"),
    (["--sparsity", "0.5", "--latency-samples", "-3"], "--latency-samples"),
])
def test_invalid_flags_exit_1(toy_model, tmp_path, capsys, flags, needle):
    code = main(["prune", "--model", str(toy_model), "--out", str(tmp_path / "x.rcv"), *flags])
    assert code == 1
    assert needle in capsys.readouterr().err


def test_missing_required_flag_exits_1(capsys):
    assert main(["prune", "--sparsity", "0.5"]) == 1
    assert "--model" in capsys.readouterr().err


def test_io_errors_exit_2(tmp_path, capsys):
    assert main(["prune", "--model", str(tmp_path / "missing.rcv"), "--sparsity", "0.5",
                 "--out", str(tmp_path / "x.rcv")]) == 2
    bad = tmp_path / "bad.rcv"
    bad.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    assert main(["profile", "--model", str(bad), "--samples", "0"]) == 2
    assert "I/O" in capsys.readouterr().err


def test_invalid_model_exits_3(toy_model, tmp_path, capsys):
    graph = load_model(toy_model)
    i = graph.prunable_indices()[-1]
    w = graph[i].weight.copy()
    w[0, 0] = np.nan
    broken = tmp_path / "nan.rcv"
    save_model(graph.replace_layer(i, graph[i].with_(weight=w)), broken)
    assert main(["prune", "--model", str(broken), "--sparsity", "0.5", "--out", str(tmp_path / "x.rcv")]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_profile_command(toy_model, tmp_path, capsys):
    report = tmp_path / "p.json"
    assert main(["profile", "--model", str(toy_model), "--samples", "3", "--warmup", "1",
                 "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["profile"]["format_version"] == 1 and len(rep["profile"]["latency_samples_ms"]) == 3
    assert rep["config"]["samples"] == 3
    assert "latency_ms=" in capsys.readouterr().out
    assert main(["profile", "--model", str(toy_model), "--batch", "0"]) == 1


def test_gendata_and_train(toy_model, tmp_path, capsys):
    tr, te = tmp_path / "tr.rcv", tmp_path / "te.rcv"
    assert main(["gendata", "--n-train", "200", "--n-test", "50", "--seed", "2",
                 "--train-out", str(tr), "--test-out", str(te)]) == 0
    hist, out = tmp_path / "h.jsonl", tmp_path / "trained.rcv"
    args = ["train", "--model", str(toy_model), "--data", str(tr), "--test-data", str(te), "--epochs", "2",
            "--batch", "50", "--lr", "0.02", "--milestones", "1", "--history", str(hist), "--out", str(out),
            "--no-timing"]
    assert main(args) == 0
    records = [json.loads(l) for l in hist.read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1] and "wall_ms" not in records[0]
    assert records[1]["lr"] == pytest.approx(0.002)
    first = hist.read_text()
    assert main(args) == 0
    assert hist.read_text() == first
    assert validate(load_model(out)).ok
    assert main([*args[:-1], "--milestones", "5,1"]) == 1


def test_train_rejects_mismatched_data(toy_model, tmp_path):
    vgg = tmp_path / "v.rcv"
    main(["genmodel", "--preset", "vgg11-cifar", "--out", str(vgg)])
    tr, te = tmp_path / "tr.rcv", tmp_path / "te.rcv"
    main(["gendata", "--n-train", "20", "--n-test", "10", "--train-out", str(tr), "--test-out", str(te)])
    assert main(["train", "--model", str(vgg), "--data", str(tr), "--epochs", "1"]) == 3


def test_compare_table(toy_model, tmp_path, capsys):
    report = tmp_path / "cmp.json"
    assert main(["compare", "--model", str(toy_model), "--sparsity", "0.8,0.95", "--seed", "2",
                 "--report", str(report), "--no-timing"]) == 0
    rep = json.loads(report.read_text())
    rows = rep["rows"]
    assert len(rows) == 10
    assert [r["policy"] for r in rows[:5]] == sorted(["reconvene", "upai", "spai_all", "inverted", "random"])
    upai = [r for r in rows if r["policy"] == "upai"]
    assert all(r["compression"] == 1.0 for r in upai)
    assert all(r["accuracy"] is None for r in rows)
    first = report.read_text()
    assert main(["compare", "--model", str(toy_model), "--sparsity", "0.8,0.95", "--seed", "2",
                 "--report", str(report), "--no-timing"]) == 0
    assert report.read_text() == first
    assert main(["compare", "--model", str(toy_model), "--sparsity", "0.9", "--policies", "upai,bogus"]) == 1


def test_compare_with_training(toy_model, tmp_path):
    tr, te = tmp_path / "tr.rcv", tmp_path / "te.rcv"
    main(["gendata", "--n-train", "100", "--n-test", "50", "--train-out", str(tr), "--test-out", str(te)])
    report = tmp_path / "cmp.json"
    assert main(["compare", "--model", str(toy_model), "--sparsity", "0.9", "--policies", "reconvene,upai",
                 "--data", str(tr), "--test-data", str(te), "--epochs", "1", "--batch", "50",
                 "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["dense"]["accuracy"] is not None
    for r in rep["rows"]:
        assert 0 <= r["accuracy"] <= 1
        assert r["accuracy_delta"] == pytest.approx(r["accuracy"] - rep["dense"]["accuracy"])


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "reconvene", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout

import json
import subprocess
import sys

import pytest

from qnet.cli import main
from qnet.evaluate import parse_report


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--per-class", 12, "--seed", 4, "--size", 64, "-o", d / "data") == 0
    assert run("build", "--arch", "mobilenetv1", "--alpha", 0.25, "--res", 96, "--seed", 1, "-o", d / "m.qnet") == 0
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 5, "batch_size": 8}))
    assert run("train", "--model", d / "m.qnet", "--manifest", d / "data" / "manifest.jsonl",
               "--config", cfg, "--epochs", 2, "-o", d / "t.qnet", "--history", d / "h.csv",
               "--plot", d / "h.png") == 0
    assert run("quantize", "--model", d / "t.qnet", "--dtype", "f16", "-o", d / "t16.qnet") == 0
    return d


def test_train_outputs(work):
    lines = (work / "h.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,lr,train_loss")
    assert len(lines) == 1 + 2  # --epochs overrides the config file
    assert (work / "h.png").stat().st_size > 0


def test_quantize_eval_bench_stats(work, capsys):
    man = work / "data" / "manifest.jsonl"
    assert run("quantize", "--model", work / "t.qnet", "--dtype", "i8", "--calib", f"{man}:train",
               "--calib-samples", 16, "--profile-out", work / "p.json", "-o", work / "t8.qnet") == 0
    assert "conv1" in json.loads((work / "p.json").read_text())
    for tag in ("t", "t16", "t8"):
        assert run("eval", "--model", work / f"{tag}.qnet", "--manifest", man, "--split", "test",
                   "-o", work / f"{tag}.json", "--plot", work / f"{tag}_cm.png") == 0
    r32, r16 = parse_report((work / "t.json").read_bytes()), parse_report((work / "t16.json").read_bytes())
    assert abs(r32.top1 - r16.top1) <= 0.005
    assert r16.dtype == "f16"

    assert run("bench", "--model", work / "t.qnet", "--model", work / "t16.qnet", "--runs", 1,
               "--warmup", 0, "-o", work / "b.json", "--plot", work / "lat.png") == 0
    for b in parse_report((work / "b.json").read_bytes()):
        assert b.runs == 1 and b.mean_ms == b.min_ms == b.max_ms

    capsys.readouterr()
    assert run("stats", "--model", work / "t.qnet", "--model", work / "t16.qnet", "--model", work / "t8.qnet",
               "--format", "json", "--eval", work / "t.json", "--eval", work / "t16.json",
               "--eval", work / "t8.json", "--plot", work / "eff.png") == 0
    out = json.loads(capsys.readouterr().out)
    ratios = {r["dtype"]: r["ratio_vs_f32"] for r in out["sizes"]}
    assert ratios["f32"] == 1.0 and ratios["f16"] <= 0.55 and ratios["i8"] <= 0.30
    assert (work / "eff.png").stat().st_size > 0


def test_stats_resnet_flops(tmp_path, capsys):
    assert run("build", "--arch", "resnet50", "--res", 224, "-o", tmp_path / "r.qnet") == 0
    capsys.readouterr()
    assert run("stats", "--model", tmp_path / "r.qnet", "--format", "json") == 0
    flops = json.loads(capsys.readouterr().out)["models"][0]["flops"]
    assert 3.2e9 <= flops <= 4.8e9


def test_seeded_commands_are_bit_identical(work, tmp_path):
    assert run("synth-data", "--per-class", 12, "--seed", 4, "--size", 64, "-o", tmp_path / "data") == 0
    a = (work / "data" / "manifest.jsonl").read_text().replace(str(work / "data"), "")
    b = (tmp_path / "data" / "manifest.jsonl").read_text().replace(str(tmp_path / "data"), "")
    assert a == b
    assert run("build", "--arch", "mobilenetv1", "--alpha", 0.25, "--res", 96, "--seed", 1, "-o", tmp_path / "m.qnet") == 0
    assert (tmp_path / "m.qnet").read_bytes() == (work / "m.qnet").read_bytes()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 5, "batch_size": 8}))
    assert run("train", "--model", tmp_path / "m.qnet", "--manifest", work / "data" / "manifest.jsonl",
               "--config", cfg, "--epochs", 2, "-o", tmp_path / "t.qnet", "--history", tmp_path / "h.csv") == 0
    assert (tmp_path / "t.qnet").read_bytes() == (work / "t.qnet").read_bytes()
    assert (tmp_path / "h.csv").read_bytes() == (work / "h.csv").read_bytes()


def test_exit_codes(work, tmp_path, monkeypatch):
    assert run("frobnicate") == 2
    assert run("build", "--arch", "vgg16", "-o", tmp_path / "x") == 2
    assert run("build", "--arch", "mobilenetv1", "--res", 100, "-o", tmp_path / "x") == 2
    assert run("build", "--arch", "mobilenetv1", "--bogus-flag", "-o", tmp_path / "x") == 2
    assert run("eval", "--model", tmp_path / "missing.qnet", "--manifest", work / "data" / "manifest.jsonl") == 3
    (tmp_path / "junk.qnet").write_bytes(b"not a model")
    assert run("stats", "--model", tmp_path / "junk.qnet") == 3
    assert run("quantize", "--model", work / "t.qnet", "--dtype", "i8", "-o", tmp_path / "q") == 2
    monkeypatch.setenv("QNET_UNSUPPORTED_DTYPES", "f16")
    assert run("bench", "--model", work / "t16.qnet", "--runs", 1) == 4


def test_console_entry_point(tmp_path):
    p = subprocess.run([sys.executable, "-m", "qnet.cli", "build", "--arch", "nope", "-o", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert p.returncode == 2 and "invalid choice" in p.stderr

import csv
import io
import json

import numpy as np
import pytest

from qnet import plots
from qnet.builders import init_weights
from qnet.container import Model
from qnet.data import Dataset
from qnet.errors import CapabilityError, IntegrityError, UsageError
from qnet.evaluate import (BenchReport, EvalReport, benchmark, emit_report, evaluate,
                           parse_report, supported_dtypes)
from qnet.train import TrainingHistory, EpochRecord

from conftest import small_net

NAMES = ["a", "b", "c"]


class Constant:
    """Stand-in model that always predicts one class."""
    dtype = "f32"

    def __init__(self, graph, cls):
        self.graph, self.cls = graph, cls

    def predict(self, x):
        p = np.zeros((len(x), 3), np.float32)
        p[:, self.cls] = 1
        return p


def _balanced(n=30):
    return Dataset(np.zeros((n, 8, 8, 3), np.uint8), np.arange(n) % 3, tuple(NAMES))


def test_constant_model():
    r = evaluate(Constant(small_net(), 0), _balanced())
    assert r.top1 == pytest.approx(1 / 3)
    cm = np.array(r.confusion)
    assert cm[:, 1:].sum() == 0 and cm[:, 0].tolist() == [10, 10, 10]


def test_perfect_labels():
    labels = np.array([0, 1, 2, 2, 1])
    r = EvalReport.from_predictions(labels, labels, NAMES)
    assert r.top1 == 1.0 and r.per_class == [1.0, 1.0, 1.0]
    assert np.array_equal(np.array(r.confusion), np.diag([1, 2, 2]))


def test_metrics_recomputed_from_predictions():
    g = small_net()
    m = Model(g, init_weights(g, 9))
    rng = np.random.default_rng(0)
    ds = Dataset(rng.integers(0, 256, (40, 8, 8, 3), dtype=np.uint8), rng.integers(0, 3, 40), tuple(NAMES))
    r = evaluate(m, ds)
    pairs = r.predictions
    assert [t for t, _ in pairs] == ds.labels.tolist()
    correct = sum(1 for t, p in pairs if t == p)
    assert r.top1 == correct / len(pairs)
    for c in range(3):
        rows = [p for t, p in pairs if t == c]
        assert r.per_class[c] == (sum(p == c for p in rows) / len(rows) if rows else 0.0)


def test_report_integrity_checks():
    with pytest.raises(IntegrityError):
        EvalReport(NAMES, [[1, 0], [0, 1]])
    r = EvalReport.from_predictions([0, 1, 2], [0, 2, 2], NAMES)
    d = r.to_dict()
    d["top1"] = 1.0
    with pytest.raises(IntegrityError):
        EvalReport.from_dict(d)
    d = r.to_dict()
    d["predictions"][0] = [0, 1]
    with pytest.raises(IntegrityError):
        EvalReport.from_dict(d)


def test_label_out_of_range():
    ds = Dataset(np.zeros((2, 8, 8, 3), np.uint8), np.array([0, 3]))
    with pytest.raises(UsageError):
        evaluate(Constant(small_net(), 0), ds)


def test_bench_report_identities():
    b = BenchReport.from_timings("m", "f32", [100.0], 0)
    assert b.mean_ms == b.min_ms == b.max_ms == 100.0 and b.fps == 10.0
    b = BenchReport.from_timings("m", "f32", [1.0, 2.0, 4.0], 5)
    assert b.fps == 1000 / b.mean_ms
    with pytest.raises(IntegrityError):
        BenchReport.from_timings("m", "f32", [-1.0], 0)


def test_benchmark_single_run():
    g = small_net()
    b = benchmark(Model(g, init_weights(g, 0)), runs=1, warmup=0)
    assert b.runs == 1 and b.mean_ms == b.min_ms == b.max_ms
    assert b.fps == 1000 / b.mean_ms


def test_unsupported_dtype(monkeypatch):
    monkeypatch.setenv("QNET_UNSUPPORTED_DTYPES", "f16,i8")
    assert supported_dtypes() == ("f32",)
    g = small_net()
    m = Model(g, {k: {p: a.astype(np.float16) for p, a in v.items()} for k, v in init_weights(g, 0).items()}, "f16")
    with pytest.raises(CapabilityError):
        benchmark(m, runs=1)


def test_json_reemit_byte_identical():
    r = EvalReport.from_predictions([0, 1, 2, 1], [0, 1, 1, 1], NAMES, model_id="x", dtype="f16")
    blob = emit_report(r, "json")
    assert emit_report(parse_report(blob), "json") == blob
    benches = [BenchReport.from_timings("m", d, [1.5, 2.5], 1, host="h") for d in ("f32", "f16")]
    blob = emit_report(benches, "json")
    assert emit_report(parse_report(blob), "json") == blob


def test_csv_rows():
    r = EvalReport.from_predictions([0, 1, 2, 1], [0, 1, 1, 1], NAMES)
    rows = list(csv.reader(io.StringIO(emit_report(r, "csv").decode())))
    assert len(rows) == len(NAMES) + 1


def test_text_table_one_row_per_pair():
    benches = [BenchReport.from_timings(m, d, [2.0], 0, host="h")
               for m in ("resnet50", "mobilenetv1") for d in ("f32", "f16")]
    lines = emit_report(benches, "text_table").decode().strip().splitlines()
    assert len(lines) == 2 + 4
    assert {tuple(l.split()[:2]) for l in lines[2:]} == {(m, d) for m in ("resnet50", "mobilenetv1")
                                                         for d in ("f32", "f16")}
    with pytest.raises(UsageError):
        emit_report(benches, "xml")


def test_plots_written(tmp_path):
    hist = TrainingHistory([EpochRecord(i + 1, 1e-3, 1.0 / (i + 1), 0.5, 1.1 / (i + 1), 0.5, 1 + (i >= 2))
                            for i in range(4)], stage_boundary=2)
    r = EvalReport.from_predictions([0, 1, 2], [0, 1, 1], NAMES, model_id="m", dtype="f32")
    b = BenchReport.from_timings("m", "f32", [1.0, 2.0], 0, host="h")
    outs = [plots.plot_history(hist, tmp_path / "h.png"),
            plots.plot_confusion(r, tmp_path / "c.png"),
            plots.plot_latency([b], tmp_path / "l.png"),
            plots.plot_efficiency([{"label": "m", "flops": 1e9, "top1": 0.9, "bytes": 1e6}], tmp_path / "e.svg")]
    for p in outs:
        assert p.stat().st_size > 1000
    assert (tmp_path / "h.png").read_bytes()[:4] == b"\x89PNG"
    assert json.dumps(r.to_dict())

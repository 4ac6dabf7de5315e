"""Accuracy evaluation and single-image latency benchmarking."""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .container import Model
from .data import Dataset, preprocess
from .errors import CapabilityError, IntegrityError, UsageError

ALL_DTYPES = ("f32", "f16", "i8")


@dataclass
class EvalReport:
    """Confusion matrix (rows = true class, cols = predicted) and derived metrics."""
    class_names: List[str]
    confusion: List[List[int]]
    model_id: str = ""
    dtype: str = ""
    predictions: List[List[int]] = field(default_factory=list)
    per_class: List[float] = field(init=False)
    top1: float = field(init=False)
    support: List[int] = field(init=False)

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        c = len(self.class_names)
        if cm.shape != (c, c):
            raise IntegrityError(f"confusion matrix {cm.shape} does not match {c} classes")
        if np.any(cm < 0):
            raise IntegrityError("confusion matrix has negative counts")
        total = int(cm.sum())
        if total == 0:
            raise IntegrityError("confusion matrix is empty")
        self.confusion = cm.tolist()
        self.support = cm.sum(axis=1).tolist()
        self.top1 = float(np.trace(cm) / total)
        self.per_class = [float(cm[i, i] / s) if s else 0.0 for i, s in enumerate(self.support)]
        self.verify()

    def verify(self) -> None:
        cm = np.asarray(self.confusion)
        if self.top1 != float(np.trace(cm) / cm.sum()):
            raise IntegrityError("top1 disagrees with confusion trace")
        for i, s in enumerate(cm.sum(axis=1)):
            if s and self.per_class[i] != float(cm[i, i] / s):
                raise IntegrityError(f"per-class accuracy of class {i} disagrees with confusion")
        if self.predictions:
            if confusion_from_pairs(self.predictions, len(self.class_names)).tolist() != self.confusion:
                raise IntegrityError("stored predictions disagree with confusion matrix")

    @classmethod
    def from_predictions(cls, labels, preds, class_names, **kw) -> "EvalReport":
        pairs = [[int(a), int(b)] for a, b in zip(labels, preds)]
        cm = confusion_from_pairs(pairs, len(class_names))
        return cls(list(class_names), cm.tolist(), predictions=pairs, **kw)

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "dtype": self.dtype, "class_names": self.class_names,
                "top1": self.top1, "per_class": self.per_class, "support": self.support,
                "confusion": self.confusion, "predictions": self.predictions}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        r = cls(d["class_names"], d["confusion"], d.get("model_id", ""), d.get("dtype", ""),
                d.get("predictions", []))
        if r.top1 != d["top1"] or r.per_class != d["per_class"]:
            raise IntegrityError("report metrics disagree with its confusion matrix")
        return r


def confusion_from_pairs(pairs, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), np.int64)
    for t, p in pairs:
        cm[t, p] += 1
    return cm


def evaluate(model: Model, dataset: Dataset, scheme: Optional[str] = None,
             batch_size: int = 64, model_id: str = "") -> EvalReport:
    """Top-1 evaluation; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty split")
    nc = model.graph.num_classes
    if dataset.labels.max() >= nc:
        raise UsageError(f"dataset labels exceed the model's {nc} classes")
    scheme = scheme or model.graph.metadata.get("preprocess") or (
        "resnet_mean_subtract" if model.graph.metadata.get("architecture") == "resnet50"
        else "mobilenet_unit_range")
    preds = []
    for i in range(0, len(dataset), batch_size):
        p = model.predict(preprocess(dataset.images[i:i + batch_size], scheme))
        preds.append(np.argmax(p, axis=1))
    preds = np.concatenate(preds)
    names = list(dataset.class_names)[:nc] if len(dataset.class_names) >= nc else \
        [f"class_{i}" for i in range(nc)]
    return EvalReport.from_predictions(dataset.labels, preds, names,
                                       model_id=model_id, dtype=model.dtype)


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchReport:
    model_id: str
    dtype: str
    runs: int
    warmup: int
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    fps: float
    host: str

    def __post_init__(self):
        if self.runs < 1:
            raise IntegrityError("benchmark needs at least one run")
        if not self.min_ms <= self.mean_ms <= self.max_ms:
            raise IntegrityError("benchmark statistics out of order")

    @classmethod
    def from_timings(cls, model_id, dtype, timings_ms: Sequence[float], warmup: int,
                     host: Optional[str] = None) -> "BenchReport":
        ts = [float(t) for t in timings_ms]
        if any(t < 0 for t in ts):
            raise IntegrityError("negative duration from a monotonic clock")
        mean = statistics.fmean(ts)
        # fmean can land one ulp outside [min, max] for constant samples
        mean = min(max(mean, min(ts)), max(ts))
        return cls(model_id, dtype, len(ts), warmup, mean,
                   statistics.pstdev(ts) if len(ts) > 1 else 0.0, min(ts), max(ts),
                   1000.0 / mean if mean > 0 else float("inf"), host or host_description())

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls(**d)


def host_description() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()} " \
           f"python{platform.python_version()} cpus={os.cpu_count()}"


def supported_dtypes() -> tuple:
    """Model dtypes this host can execute.

    ``QNET_UNSUPPORTED_DTYPES`` (comma list) removes entries, to emulate a
    device that lacks a precision.
    """
    blocked = {s.strip() for s in os.environ.get("QNET_UNSUPPORTED_DTYPES", "").split(",") if s.strip()}
    return tuple(d for d in ALL_DTYPES if d not in blocked)


def benchmark(model: Model, runs: int = 1000, warmup: int = 50, seed: int = 0,
              model_id: str = "", input_shape=None) -> BenchReport:
    """Time ``runs`` single-image forward passes after ``warmup`` untimed ones."""
    if runs < 1 or warmup < 0:
        raise UsageError("runs must be >= 1 and warmup >= 0")
    if model.dtype not in supported_dtypes():
        raise CapabilityError(f"this host does not support {model.dtype} models")
    shape = tuple(input_shape or (1,) + model.graph.input_shape)
    if shape[0] != 1:
        raise UsageError("benchmark runs single-image batches")
    x = np.random.default_rng(seed).uniform(-1, 1, shape).astype(np.float32)
    timings = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model.predict(x)
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            model.predict(x)
            dt = time.perf_counter_ns() - t0
            assert dt >= 0
            timings.append(dt / 1e6)
    return BenchReport.from_timings(model_id or model.graph.metadata.get("architecture", "model"),
                                    model.dtype, timings, warmup)


# ---------------------------------------------------------------------------
# emission

Report = Union[EvalReport, BenchReport]


def _as_list(report) -> list:
    return list(report) if isinstance(report, (list, tuple)) else [report]


def emit_report(report, fmt: str = "json") -> bytes:
    """Serialize one report (or a list of bench reports) as json, csv or a text table."""
    reports = _as_list(report)
    if fmt == "json":
        body = [r.to_dict() for r in reports]
        obj = body if isinstance(report, (list, tuple)) else body[0]
        return (json.dumps(obj, indent=2) + "\n").encode()
    if fmt == "csv":
        return _csv(reports).encode()
    if fmt in ("text", "text_table"):
        return _text(reports).encode()
    raise UsageError(f"unknown report format {fmt!r}")


def parse_report(data: Union[bytes, str]):
    obj = json.loads(data)

    def one(d):
        return EvalReport.from_dict(d) if "confusion" in d else BenchReport.from_dict(d)

    return [one(d) for d in obj] if isinstance(obj, list) else one(obj)


def _csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if all(isinstance(r, EvalReport) for r in reports):
        w.writerow(["model_id", "dtype", "class", "accuracy", "support"])
        for r in reports:
            for name, acc, n in zip(r.class_names, r.per_class, r.support):
                w.writerow([r.model_id, r.dtype, name, repr(acc), n])
        return buf.getvalue()
    cols = list(BenchReport.__dataclass_fields__)
    w.writerow(cols)
    for r in reports:
        w.writerow([getattr(r, c) for c in cols])
    return buf.getvalue()


def _text(reports) -> str:
    if all(isinstance(r, EvalReport) for r in reports):
        rows = [["model", "dtype"] + list(reports[0].class_names) + ["top1"]]
        for r in reports:
            rows.append([r.model_id, r.dtype] + [f"{a:.5f}" for a in r.per_class] + [f"{r.top1:.5f}"])
    else:
        rows = [["model", "dtype", "runs", "mean_ms", "std_ms", "min_ms", "max_ms", "fps"]]
        for r in reports:
            rows.append([r.model_id, r.dtype, str(r.runs), f"{r.mean_ms:.3f}", f"{r.std_ms:.3f}",
                         f"{r.min_ms:.3f}", f"{r.max_ms:.3f}", f"{r.fps:.2f}"])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"

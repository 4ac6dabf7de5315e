"""Figures written next to the delimited reports."""
from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .container import atomic_write  # noqa: E402
from .evaluate import BenchReport, EvalReport  # noqa: E402
from .train import TrainingHistory  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, dpi=120, format=path.suffix.lstrip(".") or "png")
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return path


def plot_history(history: TrainingHistory, path, title: str = "") -> Path:
    """Loss and accuracy per epoch; a dotted line marks the stage boundary."""
    epochs = [r.epoch for r in history.records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r.train_loss for r in history.records], label="train")
    ax_loss.plot(epochs, [r.val_loss for r in history.records], label="validation")
    ax_acc.plot(epochs, [r.train_acc for r in history.records], label="train")
    ax_acc.plot(epochs, [r.val_acc for r in history.records], label="validation")
    ax_loss.set_ylabel("cross-entropy loss")
    ax_acc.set_ylabel("accuracy")
    for ax in (ax_loss, ax_acc):
        ax.set_xlabel("epoch")
        if history.stage_boundary:
            ax.axvline(history.stage_boundary + 0.5, color="purple", linestyle=":")
        ax.legend()
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_confusion(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(report.confusion, cmap="Blues")
    n = len(report.class_names)
    ax.set_xticks(range(n), report.class_names, rotation=30, ha="right")
    ax.set_yticks(range(n), report.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i, row in enumerate(report.confusion):
        for j, v in enumerate(row):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=9)
    fig.colorbar(im, ax=ax)
    ax.set_title(f"{report.model_id} {report.dtype}  top-1 {report.top1:.4f}".strip())
    return _save(fig, path)


def plot_efficiency(entries: Sequence[dict], path) -> Path:
    """Top-1 against operations per image; marker area tracks model bytes.

    Each entry needs ``label``, ``flops``, ``top1`` and ``bytes``.
    """
    fig, ax = plt.subplots(figsize=(6, 4.5))
    biggest = max(e["bytes"] for e in entries)
    for e in entries:
        ax.scatter(e["flops"] / 1e9, e["top1"], s=40 + 1500 * e["bytes"] / biggest, alpha=0.5)
        ax.annotate(f"{e['label']}\n{e['bytes'] / 1e6:.1f} MB", (e["flops"] / 1e9, e["top1"]),
                    fontsize=8, ha="center", va="center")
    ax.set_xlabel("operations per image (G)")
    ax.set_ylabel("top-1 accuracy")
    return _save(fig, path)


def plot_latency(reports: Sequence[BenchReport], path) -> Path:
    """Horizontal bars of mean inference time on a log axis."""
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(reports) + 1.5))
    labels = [f"{r.model_id}-{r.dtype}" for r in reports]
    ax.barh(labels, [r.mean_ms for r in reports], xerr=[r.std_ms for r in reports], color="tab:blue")
    ax.set_xscale("log")
    ax.set_xlabel("inference time (ms, batch size 1)")
    for i, r in enumerate(reports):
        ax.text(r.mean_ms, i, f" {r.fps:.1f} fps", va="center", fontsize=8)
    return _save(fig, path)

"""Transfer-learning fine-tuning: loss, backprop through the trainable tail,
Adam/SGD, step decay and the epoch loop."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import tensor as T
from .data import AUGMENTATIONS, Dataset, augment, preprocess
from .errors import ConfigError, IntegrityError, UsageError
from .graph import Graph, LayerSpec, WeightStore, forward

log = logging.getLogger(__name__)

# Layer kinds that do not count toward a "last N layers" trainable tail.
UNCOUNTED_KINDS = ("input", "activation", "pool", "add")
TRAINABLE_KINDS = ("conv2d", "depthwise", "dense")

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainingConfig:
    optimizer: str = "adam"
    initial_lr: float = 1e-4
    decay: str = "step"            # "none" or "step"
    decay_factor: float = 0.5
    decay_every: int = 10
    epochs: int = 30
    batch_size: int = 64
    trainable_tail: int = 23
    seed: int = 0
    momentum: float = 0.0
    augmentations: Tuple[str, ...] = AUGMENTATIONS

    def __post_init__(self):
        self.augmentations = tuple(self.augmentations)
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.decay not in ("none", "step"):
            raise ConfigError(f"decay must be 'none' or 'step', got {self.decay!r}")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.trainable_tail < 1:
            raise ConfigError("epochs, batch_size and trainable_tail must be >= 1")
        if self.decay == "step" and (self.decay_every < 1 or not self.decay_factor > 0):
            raise ConfigError("step decay needs decay_every >= 1 and decay_factor > 0")
        bad = set(self.augmentations) - set(AUGMENTATIONS)
        if bad:
            raise ConfigError(f"unknown augmentations {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentations"] = list(self.augmentations)
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    stage: int = 1


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    stage_boundary: Optional[int] = None

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "stage"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                            float(r["train_acc"]), float(r["val_loss"]), float(r["val_acc"]),
                            int(r["stage"])) for r in rows]
        stages = [r.stage for r in recs]
        boundary = stages.index(2) if 2 in stages else None
        return cls(recs, boundary)


# ---------------------------------------------------------------------------
# loss

def cross_entropy(probs: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise UsageError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise UsageError(f"labels must lie in [0, {c})")
    p = np.maximum(probs[np.arange(n), labels].astype(np.float64), 1e-12)
    return float(np.mean(-np.log(p)))


# ---------------------------------------------------------------------------
# trainable set and backward pass

def counted_layers(graph: Graph) -> List[LayerSpec]:
    return [l for l in graph if l.kind not in UNCOUNTED_KINDS]


def trainable_layers(graph: Graph, tail: int) -> List[str]:
    """Parameterized, non-batchnorm layers among the last ``tail`` counted layers."""
    counted = counted_layers(graph)
    if tail > len(counted):
        log.warning("trainable_tail %d exceeds %d countable layers; training all", tail, len(counted))
        tail = len(counted)
    return [l.name for l in counted[len(counted) - tail:] if l.kind in TRAINABLE_KINDS]


def _region(graph: Graph, trainable: Sequence[str]) -> List[LayerSpec]:
    """Layers from the first trainable one to the output, in execution order."""
    if not trainable:
        return []
    names = set(trainable)
    for i, l in enumerate(graph.layers):
        if l.name in names:
            return graph.layers[i:]
    return []


def _col2im(dcols, x_shape, kh, kw, stride, oh, ow, pads):
    sh, sw = stride
    n, h, w, c = x_shape
    top, bottom, left, right = pads
    dxp = np.zeros((n, h + top + bottom, w + left + right, c), dcols.dtype)
    d = dcols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += d[:, :, :, i, j, :]
    return dxp[:, top:top + h, left:left + w, :]


def conv2d_backward(x, kernel, dout, stride, padding, need_dx=True):
    kh, kw, cin, cout = kernel.shape
    n, h, w, _ = x.shape
    oh, ow, pads = T.conv_geometry(h, w, kh, kw, stride, padding)
    s = T._pair(stride)
    cols = T.im2col(T.pad_nhwc(x, pads), kh, kw, s, oh, ow)
    d2 = dout.reshape(-1, cout)
    dk = (cols.T @ d2).reshape(kernel.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = d2 @ kernel.reshape(-1, cout).T
        dx = _col2im(dcols, x.shape, kh, kw, s, oh, ow, pads)
    return dx, dk, db


def depthwise_backward(x, kernel, dout, stride, padding, need_dx=True):
    kh, kw, c, _ = kernel.shape
    n, h, w, _ = x.shape
    oh, ow, pads = T.conv_geometry(h, w, kh, kw, stride, padding)
    sh, sw = T._pair(stride)
    xp = T.pad_nhwc(x, pads)
    dk = np.zeros_like(kernel)
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(i, i + sh * (oh - 1) + 1, sh), slice(j, j + sw * (ow - 1) + 1, sw))
            dk[i, j, :, 0] = np.einsum("nhwc,nhwc->c", xp[win], dout)
            if need_dx:
                dxp[win] += dout * kernel[i, j, :, 0]
    db = dout.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        top, _, left, _ = pads
        dx = dxp[:, top:top + h, left:left + w, :]
    return dx, dk, db


def _maxpool_backward(x, y, dout, layer):
    a = layer.attrs
    kh, kw = T._pair(a.get("window", 2))
    sh, sw = T._pair(a.get("stride", a.get("window", 2)))
    n, h, w, c = x.shape
    oh, ow, pads = T.conv_geometry(h, w, kh, kw, (sh, sw), a.get("padding", "valid"))
    xp = T.pad_nhwc(x, pads, value=-np.inf)
    dxp = np.zeros_like(xp)
    taken = np.zeros(y.shape, bool)
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(i, i + sh * (oh - 1) + 1, sh), slice(j, j + sw * (ow - 1) + 1, sw))
            hit = (xp[win] == y) & ~taken
            dxp[win] += np.where(hit, dout, 0)
            taken |= hit
    top, _, left, _ = pads
    return dxp[:, top:top + h, left:left + w, :]


def backward(graph: Graph, weights: WeightStore, cache: dict, labels: Sequence[int],
             trainable: Sequence[str]) -> Dict[str, Dict[str, np.ndarray]]:
    """Gradients of mean cross-entropy for the trainable layers.

    ``cache`` comes from a train-mode :func:`forward` that kept the outputs of
    every layer in the trainable region and of the layers feeding it.  The
    output layer must be a softmax.
    """
    outs = cache["outputs"]
    masks = cache.get("masks", {})
    out_layer = graph.output
    if out_layer.kind != "activation" or out_layer.attrs.get("fn") != "softmax":
        raise UsageError("backward expects a softmax output layer")
    probs = outs[out_layer.name]
    labels = np.asarray(labels)
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= np.float32(n)
    region = _region(graph, trainable)
    if not region:
        return {}
    trainable = set(trainable)
    first = region[0].name
    grads_out: Dict[str, np.ndarray] = {out_layer.inputs[0]: dlogits}
    result: Dict[str, Dict[str, np.ndarray]] = {}

    def push(name, g):
        if name in grads_out:
            grads_out[name] = grads_out[name] + g
        else:
            grads_out[name] = g

    for layer in reversed(region[:-1]):
        dout = grads_out.pop(layer.name, None)
        if dout is None:
            continue
        need_dx = layer.name != first
        k = layer.kind
        a = layer.attrs
        x = outs[layer.inputs[0]] if layer.inputs else None
        if k == "dense":
            W = weights[layer.name]["kernel"]
            if layer.name in trainable:
                g = {"kernel": x.T @ dout}
                if "bias" in weights[layer.name]:
                    g["bias"] = dout.sum(axis=0)
                result[layer.name] = g
            dx = dout @ W.T if need_dx else None
        elif k in ("conv2d", "depthwise"):
            fn = conv2d_backward if k == "conv2d" else depthwise_backward
            dx, dk, db = fn(x, weights[layer.name]["kernel"], dout, a.get("stride", 1),
                            a.get("padding", "same"), need_dx)
            if layer.name in trainable:
                g = {"kernel": dk}
                if "bias" in weights[layer.name]:
                    g["bias"] = db
                result[layer.name] = g
        elif k == "batchnorm":
            p = weights[layer.name]
            inv = p["gamma"] / np.sqrt(p["variance"] + np.float32(a.get("epsilon", 1e-3)))
            dx = dout * inv
        elif k == "activation":
            fn = a["fn"]
            if fn == "relu":
                dx = dout * (x > 0)
            elif fn == "relu6":
                dx = dout * ((x > 0) & (x < 6))
            else:
                y = outs[layer.name]
                dx = y * (dout - (dout * y).sum(axis=-1, keepdims=True))
        elif k == "pool":
            if a["fn"] == "global_avg":
                hw = x.shape[1] * x.shape[2]
                dx = np.broadcast_to((dout / np.float32(hw))[:, None, None, :], x.shape).copy()
            else:
                dx = _maxpool_backward(x, outs[layer.name], dout, layer)
        elif k == "add":
            if need_dx:
                push(layer.inputs[0], dout)
                push(layer.inputs[1], dout)
            continue
        elif k == "dropout":
            mask = masks.get(layer.name)
            dx = dout if mask is None else dout * mask
        elif k == "flatten":
            dx = dout.reshape(x.shape)
        else:
            dx = None
        if need_dx and dx is not None:
            push(layer.inputs[0], dx.astype(dout.dtype, copy=False))
    return result


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    m: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    v: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    t: int = 0
    momentum: float = 0.0


def optimizer_step(state: OptimizerState, weights: WeightStore,
                   grads: Dict[str, Dict[str, np.ndarray]], lr: float) -> WeightStore:
    """Apply one update; returns a new weight store (untouched layers shared)."""
    for lname, g in grads.items():
        for pname, arr in g.items():
            if arr.shape != weights[lname][pname].shape:
                raise UsageError(f"gradient shape {arr.shape} for {lname}/{pname} "
                                 f"does not match {weights[lname][pname].shape}")
            if not np.all(np.isfinite(arr)):
                raise IntegrityError(f"non-finite gradient for {lname}/{pname}")
    new = dict(weights)
    state.t += 1
    lr32 = np.float32(lr)
    for lname, g in grads.items():
        layer = dict(weights[lname])
        for pname, grad in g.items():
            w = layer[pname]
            if state.kind == "sgd":
                if state.momentum:
                    buf = state.m.setdefault(lname, {}).get(pname)
                    buf = grad if buf is None else np.float32(state.momentum) * buf + grad
                    state.m[lname][pname] = buf
                    step = buf
                else:
                    step = grad
                layer[pname] = (w - lr32 * step).astype(np.float32)
            else:
                m = state.m.setdefault(lname, {}).get(pname, np.zeros_like(w))
                v = state.v.setdefault(lname, {}).get(pname, np.zeros_like(w))
                m = np.float32(ADAM_BETA1) * m + np.float32(1 - ADAM_BETA1) * grad
                v = np.float32(ADAM_BETA2) * v + np.float32(1 - ADAM_BETA2) * grad * grad
                state.m[lname][pname] = m
                state.v[lname][pname] = v
                mhat = m / np.float32(1 - ADAM_BETA1 ** state.t)
                vhat = v / np.float32(1 - ADAM_BETA2 ** state.t)
                layer[pname] = (w - lr32 * mhat / (np.sqrt(vhat) + np.float32(ADAM_EPS))).astype(np.float32)
        new[lname] = layer
    return new


def lr_schedule(config: TrainingConfig, epoch: int) -> float:
    if epoch < 0:
        raise UsageError("epoch must be >= 0")
    if config.decay == "none":
        return config.initial_lr
    return config.initial_lr * config.decay_factor ** (epoch // config.decay_every)


# ---------------------------------------------------------------------------
# loops

def _check_compat(graph: Graph, *datasets: Dataset):
    for ds in datasets:
        if len(ds) == 0:
            raise UsageError("dataset is empty")
        if len(ds.class_names) != graph.num_classes:
            raise UsageError(f"dataset has {len(ds.class_names)} classes, "
                             f"graph head has {graph.num_classes}")
        if ds.labels.max() >= graph.num_classes or ds.labels.min() < 0:
            raise UsageError("dataset labels fall outside the graph's classes")
        if tuple(ds.images.shape[1:]) != graph.input_shape:
            raise UsageError(f"dataset images {ds.images.shape[1:]} do not match "
                             f"graph input {graph.input_shape}")


def _scheme(graph: Graph) -> str:
    return graph.metadata.get("preprocess") or (
        "resnet_mean_subtract" if graph.metadata.get("architecture") == "resnet50"
        else "mobilenet_unit_range")


def evaluate_loss(graph: Graph, weights: WeightStore, ds: Dataset,
                  batch_size: int = 64) -> Tuple[float, float]:
    scheme = _scheme(graph)
    total, correct = 0.0, 0
    for i in range(0, len(ds), batch_size):
        x = preprocess(ds.images[i:i + batch_size], scheme)
        y = ds.labels[i:i + batch_size]
        p = forward(graph, weights, x, mode="infer")
        total += cross_entropy(p, y) * len(y)
        correct += int((p.argmax(axis=1) == y).sum())
    return total / len(ds), correct / len(ds)


def _train_epoch(graph, weights, ds, config, trainable, state, lr, epoch, stage_seed):
    scheme = _scheme(graph)
    region = _region(graph, trainable)
    keep = {l.name for l in region} | {s for l in region for s in l.inputs}
    order = np.random.default_rng([stage_seed, epoch, 0]).permutation(len(ds))
    total, correct = 0.0, 0
    for step, start in enumerate(range(0, len(ds), config.batch_size)):
        idx = order[start:start + config.batch_size]
        imgs = ds.images[idx]
        if config.augmentations:
            imgs = np.stack([augment(im, config.augmentations, [stage_seed, epoch, int(j)])
                             for im, j in zip(imgs, idx)])
        x = preprocess(imgs, scheme)
        labels = ds.labels[idx]
        cache: dict = {}
        rng = np.random.default_rng([stage_seed, epoch, step, 1])
        probs = forward(graph, weights, x, mode="train", rng=rng, keep=keep, cache=cache)
        total += cross_entropy(probs, labels) * len(idx)
        correct += int((probs.argmax(axis=1) == labels).sum())
        grads = backward(graph, weights, cache, labels, trainable)
        weights = optimizer_step(state, weights, grads, lr)
    return weights, total / len(ds), correct / len(ds)


def fit(graph: Graph, weights: WeightStore, train_set: Dataset, val_set: Dataset,
        config: TrainingConfig, stage: int = 1,
        history: Optional[TrainingHistory] = None, progress=None) -> Tuple[WeightStore, TrainingHistory]:
    """Fixed-budget fine-tuning of the trailing ``config.trainable_tail`` layers."""
    _check_compat(graph, train_set, val_set)
    trainable = trainable_layers(graph, config.trainable_tail)
    if not trainable:
        raise ConfigError(f"trainable_tail={config.trainable_tail} selects no parameterized layer")
    history = history if history is not None else TrainingHistory()
    state = OptimizerState(config.optimizer, momentum=config.momentum)
    epoch0 = len(history)
    for e in range(config.epochs):
        lr = lr_schedule(config, e)
        weights, tl, ta = _train_epoch(graph, weights, train_set, config, trainable, state, lr,
                                       e, [config.seed, stage])
        vl, va = evaluate_loss(graph, weights, val_set, config.batch_size)
        rec = EpochRecord(epoch0 + e + 1, float(lr), tl, ta, vl, va, stage)
        history.records.append(rec)
        log.info("epoch %d lr %.2e loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 rec.epoch, lr, tl, ta, vl, va)
        if progress is not None:
            progress(rec)
    return weights, history


def staged_fit(graph: Graph, weights: WeightStore, train_set: Dataset, val_set: Dataset,
               stage1: TrainingConfig, stage2: TrainingConfig,
               progress=None) -> Tuple[WeightStore, TrainingHistory]:
    """Warm up a shallow tail, then continue with a deeper tail and fresh optimizer."""
    weights, history = fit(graph, weights, train_set, val_set, stage1, 1, progress=progress)
    history.stage_boundary = len(history)
    weights, history = fit(graph, weights, train_set, val_set, stage2, 2, history, progress)
    return weights, history

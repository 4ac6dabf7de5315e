"""Command-line entry point: build, train, quantize, eval, bench, stats, synth-data.

Exit codes: 0 success, 1 internal error, 2 usage, 3 file/format, 4 capability.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import builders, container, data, evaluate, graph, plots, quantize, train
from .errors import QnetError, UsageError
from .runtime import thread_limit, tune_allocator

log = logging.getLogger("qnet")

TRAIN_DEFAULTS = {
    "optimizer": "adam", "initial_lr": 1e-4, "decay": "step", "decay_factor": 0.5,
    "decay_every": 10, "epochs": 30, "batch_size": 64, "trainable_tail": 23,
}
STAGE2_DEFAULTS = {
    "optimizer": "sgd", "initial_lr": 1e-3, "decay": "none", "epochs": 50,
    "batch_size": 64, "trainable_tail": 23,
}


def _arch_defaults(g: graph.Graph) -> dict:
    d = dict(TRAIN_DEFAULTS)
    arch = g.metadata.get("architecture")
    if arch == "mobilenetv2":
        d["initial_lr"] = 1e-5
    if arch == "resnet50":
        # head only: the original layers stay frozen in the warm-up stage
        d["trainable_tail"] = sum(1 for l in train.counted_layers(g) if l.attrs.get("head"))
    return d


def _write(path: Optional[str], payload: bytes) -> None:
    if path is None or path == "-":
        sys.stdout.write(payload.decode())
    else:
        container.atomic_write(path, payload)


def _parse_calib(spec: str):
    path, _, split = spec.partition(":")
    return path, split or "train"


# ---------------------------------------------------------------------------
# commands

def cmd_build(args) -> int:
    g = builders.build(args.arch, args.classes, args.alpha, args.res)
    w = builders.init_weights(g, args.seed)
    n = container.save(container.Model(g, w, "f32"), args.output)
    log.info("wrote %s (%d bytes)", args.output, n)
    return 0


def _load_float(path) -> container.Model:
    m = container.load(path)
    if m.dtype == "i8":
        raise UsageError(f"{path} is an i8 model; this command needs f32 or f16 weights")
    return m


def cmd_train(args) -> int:
    model = _load_float(args.model)
    g = model.graph
    manifest = data.read_manifest(args.manifest)
    res = g.input_shape[0]
    tr = data.load_split(manifest, "train", res, crop=not args.no_crop)
    va = data.load_split(manifest, "val", res, crop=not args.no_crop)

    cfg = _arch_defaults(g)
    if args.config:
        cfg.update(json.loads(Path(args.config).read_text()))
    for flag, key in (("epochs", "epochs"), ("lr", "initial_lr"), ("batch_size", "batch_size"),
                      ("trainable_tail", "trainable_tail"), ("seed", "seed"),
                      ("optimizer", "optimizer")):
        v = getattr(args, flag)
        if v is not None:
            cfg[key] = v
    stage1 = train.TrainingConfig.from_dict(cfg)

    weights = model.float_weights()
    if args.stage2_config:
        s2 = dict(STAGE2_DEFAULTS, seed=stage1.seed)
        s2.update(json.loads(Path(args.stage2_config).read_text()))
        stage2 = train.TrainingConfig.from_dict(s2)
        weights, hist = train.staged_fit(g, weights, tr, va, stage1, stage2)
    else:
        weights, hist = train.fit(g, weights, tr, va, stage1)
    container.save(container.Model(g, weights, "f32"), args.output)
    if args.history:
        container.atomic_write(args.history, hist.to_csv().encode())
    if args.plot:
        plots.plot_history(hist, args.plot, title=g.metadata.get("architecture", ""))
    return 0


def cmd_quantize(args) -> int:
    model = _load_float(args.model)
    g, w = quantize.fold_batchnorm(model.graph, model.float_weights())
    if args.dtype == "f16":
        out = quantize.f16_model(g, w)
    else:
        if not args.calib:
            raise UsageError("i8 quantization needs --calib MANIFEST[:SPLIT]")
        path, split = _parse_calib(args.calib)
        ds = data.load_split(data.read_manifest(path), split, g.input_shape[0],
                             crop=not args.no_crop)
        n = min(len(ds), args.calib_samples)
        idx = np.random.default_rng(args.seed).permutation(len(ds))[:n]
        scheme = g.metadata.get("preprocess", "mobilenet_unit_range")
        x = data.preprocess(ds.images[np.sort(idx)], scheme)
        profile = quantize.calibrate(g, w, [x])
        if args.profile_out:
            profile.save(args.profile_out)
        out = quantize.quantize_i8(g, w, profile)
    n = container.save(out, args.output)
    log.info("wrote %s (%d bytes)", args.output, n)
    return 0


def cmd_eval(args) -> int:
    model = container.load(args.model)
    manifest = data.read_manifest(args.manifest)
    ds = data.load_split(manifest, args.split, model.graph.input_shape[0], crop=not args.no_crop)
    report = evaluate.evaluate(model, ds, model_id=args.model_id or Path(args.model).stem)
    _write(args.output, evaluate.emit_report(report, args.format))
    if args.plot:
        plots.plot_confusion(report, args.plot)
    return 0


def cmd_bench(args) -> int:
    reports = []
    for path in args.model:
        m = container.load(path)
        reports.append(evaluate.benchmark(m, args.runs, args.warmup, args.seed,
                                          model_id=m.graph.metadata.get("architecture", Path(path).stem)))
    _write(args.output, evaluate.emit_report(reports if len(reports) > 1 else reports[0], args.format))
    if args.plot:
        plots.plot_latency(reports, args.plot)
    return 0


def cmd_stats(args) -> int:
    rows = []
    for path in args.model:
        m = container.load(path)
        bits = args.bits or {"f32": 32, "f16": 16, "i8": 8}[m.dtype]
        st = graph.stats(m.graph, bits)
        rows.append(dict(model=str(path), architecture=m.graph.metadata.get("architecture"),
                         dtype=m.dtype, file_bytes=Path(path).stat().st_size, **st.to_dict()))
    sizes = None
    if len({r["architecture"] for r in rows}) == 1 and len({r["dtype"] for r in rows}) > 1:
        sizes = quantize.size_report(args.model)
    if args.format == "json":
        obj = {"models": rows}
        if sizes:
            obj["sizes"] = sizes
        payload = json.dumps(obj, indent=2) + "\n"
    else:
        cols = list(rows[0])
        sep = "," if args.format == "csv" else "  "
        payload = "\n".join([sep.join(cols)] + [sep.join(str(r[c]) for c in cols) for r in rows]) + "\n"
        if sizes:
            payload += "\n" + sep.join(["dtype", "bytes", "ratio_vs_f32"]) + "\n" + "".join(
                f"{r['dtype']}{sep}{r['bytes']}{sep}{r['ratio_vs_f32']:.6f}\n" for r in sizes)
    _write(args.output, payload.encode())
    if args.plot:
        if not args.eval or len(args.eval) != len(rows):
            raise UsageError("--plot needs one --eval report per --model")
        entries = []
        for r, rep_path in zip(rows, args.eval):
            rep = evaluate.parse_report(Path(rep_path).read_bytes())
            entries.append({"label": f"{r['architecture']}-{r['dtype']}", "flops": r["flops"],
                            "top1": rep.top1, "bytes": r["file_bytes"]})
        plots.plot_efficiency(entries, args.plot)
    return 0


def cmd_synth(args) -> int:
    m = data.synth_dataset(args.output, args.classes, args.per_class, args.seed, args.size)
    log.info("wrote %d records to %s", len(m.records), Path(args.output) / "manifest.jsonl")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a randomly initialised model")
    b.add_argument("--arch", required=True, choices=["resnet50", "mobilenetv1", "mobilenetv2"])
    b.add_argument("--classes", type=int, default=3)
    b.add_argument("--alpha", type=float, default=1.0)
    b.add_argument("--res", type=int, default=224)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--output", required=True)
    b.set_defaults(fn=cmd_build)

    t = sub.add_parser("train", help="fine-tune the trailing layers on a manifest")
    t.add_argument("--model", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--stage2-config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--trainable-tail", type=int)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--seed", type=int)
    t.add_argument("--no-crop", action="store_true", help="use full images instead of bbox crops")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--history")
    t.add_argument("--plot")
    t.set_defaults(fn=cmd_train)

    q = sub.add_parser("quantize", help="post-training quantization to f16 or i8")
    q.add_argument("--model", required=True)
    q.add_argument("--dtype", required=True, choices=["f16", "i8"])
    q.add_argument("--calib", help="MANIFEST[:SPLIT] used for i8 calibration (default split train)")
    q.add_argument("--calib-samples", type=int, default=100)
    q.add_argument("--profile-out")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--no-crop", action="store_true")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(fn=cmd_quantize)

    e = sub.add_parser("eval", help="top-1 / per-class accuracy on a manifest split")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=list(data.SPLITS))
    e.add_argument("--model-id")
    e.add_argument("--format", default="json", choices=["json", "csv", "text"])
    e.add_argument("--no-crop", action="store_true")
    e.add_argument("-o", "--output")
    e.add_argument("--plot")
    e.set_defaults(fn=cmd_eval)

    n = sub.add_parser("bench", help="single-image latency benchmark")
    n.add_argument("--model", required=True, action="append")
    n.add_argument("--runs", type=int, default=1000)
    n.add_argument("--warmup", type=int, default=50)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--format", default="json", choices=["json", "csv", "text"])
    n.add_argument("-o", "--output")
    n.add_argument("--plot")
    n.set_defaults(fn=cmd_bench)

    s = sub.add_parser("stats", help="parameter count, operations and bytes")
    s.add_argument("--model", required=True, action="append")
    s.add_argument("--bits", type=int, choices=[32, 16, 8])
    s.add_argument("--eval", action="append", help="eval report per model, for --plot")
    s.add_argument("--format", default="text", choices=["json", "csv", "text"])
    s.add_argument("-o", "--output")
    s.add_argument("--plot")
    s.set_defaults(fn=cmd_stats)

    d = sub.add_parser("synth-data", help="write the procedural three-class dataset")
    d.add_argument("--classes", type=int, default=3)
    d.add_argument("--per-class", type=int, default=1000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--size", type=int, default=128)
    d.add_argument("-o", "--output", required=True)
    d.set_defaults(fn=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        with thread_limit():
            return args.fn(args)
    except QnetError as e:
        print(f"qnet {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        print(f"qnet {args.command}: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"qnet {args.command}: internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

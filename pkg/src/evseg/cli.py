"""``evseg`` command line: synth, graph, train, predict, eval, label.

Exit status is 0 on success, 1 for usage errors and 2 for data errors
(missing or malformed inputs).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import domel, synth
from .autodiff import AdamState
from .events import (
    EventBoundsError,
    EventFormatError,
    EventOrderError,
    SensorGeometry,
    read_events,
    read_labels,
    slice_windows,
    write_labels,
)
from .gtnn import CorruptCheckpointError, GtnnConfig, GtnnModel, load_checkpoint, save_checkpoint
from .graph import MetricConfig, build_knn_graph, format_edge_list
from .metrics import evaluate_windows
from .pgm import PgmError, read_frame_dir, read_mask_dir, write_pgm
from .pipeline import WindowSpec, predict_stream, stream_samples
from .training import (
    LossConfig,
    ScheduleError,
    TrainConfig,
    TrainingError,
    build_schedule,
    inverse_frequency_weights,
    train,
)

log = logging.getLogger("evseg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _threads(value: int | None) -> int:
    if value is not None:
        if value < 1:
            raise UsageError(f"--threads must be at least 1, got {value}")
        return value
    env = os.environ.get("EVSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"EVSEG_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _print_config(verb: str, settings: dict) -> None:
    print(f"# evseg {verb}")
    for k, v in settings.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        print(f"{k}={v}")
    sys.stdout.flush()


def _need(path: str | Path, kind: str = "file") -> Path:
    p = Path(path)
    if kind == "file" and not p.is_file():
        raise DataError(f"{p}: no such file")
    if kind == "dir" and not p.is_dir():
        raise DataError(f"{p}: no such directory")
    return p


def _geometry(args) -> SensorGeometry | None:
    if getattr(args, "width", None) and getattr(args, "height", None):
        return SensorGeometry(args.width, args.height)
    if getattr(args, "width", None) or getattr(args, "height", None):
        raise UsageError("--width and --height must be given together")
    return None


def _read_stream(path: str, args):
    return read_events(_need(path), _geometry(args))


def _dims(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected three positive widths")
    return vals


def _time_scale(text: str) -> str | float:
    if text.upper() == "AUTO":
        return "AUTO"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--time-scale must be AUTO or a number, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("--time-scale must be positive")
    return v


# ---------------------------------------------------------------------------
# verbs


def cmd_synth(args) -> int:
    geometry = SensorGeometry(args.width or 64, args.height or 48)
    settings = {
        "out": args.out,
        "seed": args.seed,
        "objects": args.objects,
        "count": args.count,
        "width": geometry.width,
        "height": geometry.height,
        "duration_ms": args.duration_ms,
        "noise_rate": args.noise_rate,
        "frame_interval_ms": args.frame_interval_ms,
    }
    _print_config("synth", settings)
    out = Path(args.out)
    for j in range(args.count):
        seed = args.seed + j
        cfg = synth.random_scene(
            seed, args.objects, geometry, int(round(args.duration_ms * 1000)), args.noise_rate
        )
        cfg = dataclasses.replace(cfg, frame_interval_us=int(round(args.frame_interval_ms * 1000)))
        seq = synth.generate(cfg, seed)
        target = out if args.count == 1 else out / f"seq_{j:03d}"
        synth.write_sequence(seq, target)
        print(f"{target}: {len(seq.events)} events, {int(seq.labels.sum())} foreground")
    return 0


def cmd_graph(args) -> int:
    stream, geometry = _read_stream(args.input, args)
    duration = int(round(args.window_ms * 1000))
    _print_config(
        "graph",
        {"in": args.input, "window_ms": args.window_ms, "k": args.k, "nmax": args.nmax,
         "time_scale": args.time_scale, "width": geometry.width, "height": geometry.height,
         "out": args.out or "-"},
    )
    windows = slice_windows(stream, duration, args.nmax)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for wid, win in enumerate(windows):
        if len(win) <= args.k:
            print(f"window {wid}: {len(win)} events, too few for k={args.k}; skipped")
            continue
        if args.time_scale == "AUTO":
            metric = MetricConfig.auto(geometry, duration)
        else:
            metric = MetricConfig(args.time_scale)
        g = build_knn_graph(win, args.k, metric)
        print(f"window {wid}: {len(g)} nodes, {len(g) * args.k} edges, dropped {len(win.dropped_index)}")
        if out_dir:
            (out_dir / f"window_{wid:05d}.txt").write_text(format_edge_list(g), encoding="utf-8")
    return 0


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "events.txt").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "events.txt").is_file())
    if not dirs:
        raise DataError(f"{root}: no events.txt found in the directory or its subdirectories")
    return dirs


def cmd_train(args) -> int:
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_text(_need(args.config).read_text(encoding="utf-8"))
    for key in ("lr", "batch", "epochs", "subsets", "loss", "gamma", "seed", "dims", "global_dim", "head", "k",
                "window_ms", "nmax"):
        v = getattr(args, key)
        if v is not None:
            cfg.set(key, v)
    threads = _threads(args.threads)
    _print_config("train", {"data": args.data, "ckpt": args.ckpt, **{k: getattr(cfg, k) for k in
                                                                    cfg.__dataclass_fields__}, "threads": threads})
    model_cfg = GtnnConfig(encoder_dims=cfg.dims, k=cfg.k, global_dim=cfg.global_dim, head_dims=(cfg.head,),
                           seed=cfg.seed)
    spec = WindowSpec(int(round(cfg.window_ms * 1000)), cfg.nmax, cfg.k)
    dataset = []
    for d in _sequence_dirs(_need(args.data, "dir")):
        stream, geometry = read_events(d / "events.txt")
        labels, _ = read_labels(_need(d / "labels.txt"))
        if len(labels) != len(stream):
            raise DataError(f"{d / 'labels.txt'}: {len(labels)} labels for {len(stream)} events")
        dataset.extend(stream_samples(stream, labels, geometry, spec, model_cfg.min_nodes()))
    if not dataset:
        raise DataError(f"{args.data}: no window holds enough events for the model")
    weights = inverse_frequency_weights([s.labels for s in dataset])
    loss_cfg = LossConfig(cfg.loss, cfg.gamma, weights)
    try:
        schedule = build_schedule(len(dataset), cfg.subsets, cfg.epochs, cfg.batch, cfg.seed)
    except ScheduleError as exc:
        raise UsageError(str(exc)) from None
    print(f"samples={len(dataset)} class_weights={weights[0]:.6f},{weights[1]:.6f}")
    model = GtnnModel(model_cfg)

    def report(rec):
        print(f"epoch {rec.epoch} subset {rec.subset} loss {rec.loss:.6f} ({rec.seconds:.1f} s)", flush=True)

    history = train(model, dataset, schedule, loss_cfg, AdamState(lr=cfg.lr), threads=threads, on_epoch=report)
    ckpt = Path(args.ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    history.write_csv(ckpt.with_name(ckpt.name + ".history.csv"))
    ckpt.with_name(ckpt.name + ".train.cfg").write_text(cfg.to_text(), encoding="utf-8")
    return 0


def _overlay(stream, labels, win, geometry) -> np.ndarray:
    img = np.full((geometry.height, geometry.width), 128, dtype=np.uint8)
    idx = np.concatenate([win.dropped_index, win.source_index]).astype(np.int64)
    img[stream.y[idx], stream.x[idx]] = np.where(labels[idx] == 1, 255, 0)
    return img


def cmd_predict(args) -> int:
    ckpt = _need(args.ckpt)
    sidecar = ckpt.with_name(ckpt.name + ".train.cfg")
    trained = TrainConfig.from_text(sidecar.read_text(encoding="utf-8")) if sidecar.is_file() else TrainConfig()
    window_ms = args.window_ms if args.window_ms is not None else trained.window_ms
    nmax = args.nmax if args.nmax is not None else trained.nmax
    model = load_checkpoint(ckpt)
    stream, geometry = _read_stream(args.input, args)
    _print_config(
        "predict",
        {"ckpt": args.ckpt, "in": args.input, "out": args.out, "window_ms": window_ms, "nmax": nmax,
         "k": model.config.k, "width": geometry.width, "height": geometry.height,
         "dump_overlays": args.dump_overlays or "-", "threads": _threads(args.threads)},
    )
    spec = WindowSpec(int(round(window_ms * 1000)), nmax, model.config.k)
    labels, windows = predict_stream(model, stream, geometry, spec, threads=_threads(args.threads))
    write_labels(args.out, labels)
    if args.dump_overlays:
        d = Path(args.dump_overlays)
        d.mkdir(parents=True, exist_ok=True)
        for win in windows:
            write_pgm(d / f"{win.t_start}.pgm", _overlay(stream, labels, win, geometry))
    print(f"{len(labels)} events, {int(labels.sum())} foreground")
    return 0


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"f1", "iou", "dr"}
    if unknown or not metrics:
        raise UsageError(f"--metrics accepts f1, iou, dr; got {args.metrics!r}")
    pred, pred_ids = read_labels(_need(args.pred))
    gt, gt_ids = read_labels(_need(args.gt))
    if len(pred) != len(gt):
        raise DataError(f"{args.pred}: {len(pred)} labels but {args.gt} has {len(gt)}")
    spatial = {"iou", "dr"} & set(metrics)
    if spatial and not args.events:
        raise UsageError(f"metrics {sorted(spatial)} need event coordinates: pass --events")
    _print_config(
        "eval",
        {"pred": args.pred, "gt": args.gt, "events": args.events or "-", "metrics": metrics,
         "window_ms": args.window_ms, "report": args.report or "-"},
    )
    if args.events:
        stream, geometry = _read_stream(args.events, args)
        if len(stream) != len(gt):
            raise DataError(f"{args.events}: {len(stream)} events but {len(gt)} labels")
        windows = slice_windows(stream, int(round(args.window_ms * 1000)), max(len(stream), 1))
    else:
        # label files alone: one window over everything, confusion counts only
        from .events import EventStream, EventWindow

        n = len(gt)
        z = np.zeros(n, dtype=np.int64)
        stream = EventStream(np.arange(n, dtype=np.int64), z, z, z + 1)
        geometry = SensorGeometry(1, 1)
        windows = [EventWindow(stream, 0, n, max(n, 1), np.arange(n), np.zeros(0, dtype=np.int64))]
    report = evaluate_windows(
        stream, windows, pred, gt, geometry,
        gt_ids=gt_ids if np.any(gt_ids) else None,
        pred_ids=pred_ids if np.any(pred_ids) else None,
    )
    text = report.to_csv(metrics)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    summary = report.summary()
    shown = {"f1": ("f1", "recall", "precision"), "iou": ("mean_iou",), "dr": ("dr_percent",)}
    for m in metrics:
        for key in shown[m]:
            print(f"{key}={summary[key]:.6f}")
    return 0


def cmd_label(args) -> int:
    stream, geometry = _read_stream(args.events, args)
    frames = read_frame_dir(_need(args.frames, "dir"))
    masks = read_mask_dir(_need(args.masks, "dir"))
    if not frames:
        raise DataError(f"{args.frames}: no .pgm frames")
    cfg = domel.DomelConfig(shared=not args.per_frame)
    _print_config(
        "label",
        {"events": args.events, "frames": args.frames, "masks": args.masks, "out": args.out,
         **{k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, "threads": _threads(args.threads)},
    )
    for f in frames:
        if f.image.shape != (geometry.height, geometry.width):
            raise DataError(f"{args.frames}/{f.timestamp_us}.pgm: frame shape {f.image.shape} does not match the "
                            f"sensor {geometry.height}x{geometry.width}")
    result = domel.label_stream(stream, frames, masks, cfg, threads=_threads(args.threads))
    write_labels(args.out, result.labels, result.object_ids)
    for a in result.alignments:
        T = a.total
        print(f"alignment frames={len(a.frames)} theta_deg={np.rad2deg(T.theta):.4f} tx={T.tx:.4f} ty={T.ty:.4f}")
    print(f"{len(stream)} events, {int(result.labels.sum())} foreground")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evseg", description="Event-camera motion segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    def geom(sp):
        sp.add_argument("--width", type=int, help="sensor width (overrides the file's geometry comment)")
        sp.add_argument("--height", type=int, help="sensor height")

    s = sub.add_parser("synth", help="generate labeled synthetic sequences")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objects", type=int, default=1)
    s.add_argument("--count", type=int, default=1, help="number of sequences (seq_NNN subdirectories when > 1)")
    s.add_argument("--duration-ms", type=float, default=60.0)
    s.add_argument("--noise-rate", type=float, default=0.0, help="noise events per pixel per second")
    s.add_argument("--frame-interval-ms", type=float, default=10.0)
    geom(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("graph", help="build k-NN graphs per window")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--window-ms", type=float, default=10.0)
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--nmax", type=int, default=5000)
    s.add_argument("--time-scale", type=_time_scale, default="AUTO")
    s.add_argument("--out", help="directory for per-window edge lists")
    geom(s)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("train", help="train a model on labeled sequences")
    s.add_argument("--data", required=True, help="sequence directory or a directory of them")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", help="key=value training config file; flags override it")
    s.add_argument("--subsets", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--loss", choices=["cross_entropy", "focal", "dual_focal"])
    s.add_argument("--gamma", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--dims", type=_dims)
    s.add_argument("--global-dim", type=int)
    s.add_argument("--head", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--window-ms", type=float)
    s.add_argument("--nmax", type=int)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="label a stream with a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window-ms", type=float)
    s.add_argument("--nmax", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--dump-overlays", help="directory for per-window PGM overlays")
    geom(s)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score predicted labels against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--events", help="event file; required for iou and dr")
    s.add_argument("--metrics", default="f1,iou,dr")
    s.add_argument("--window-ms", type=float, default=10.0)
    s.add_argument("--report", help="CSV report path")
    geom(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("label", help="label events from APS frames and object masks")
    s.add_argument("--events", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--per-frame", action="store_true", help="fit one transform per frame instead of one shared")
    s.add_argument("--threads", type=int)
    geom(s)
    s.set_defaults(func=cmd_label)
    return p


_DATA_ERRORS = (
    DataError,
    FileNotFoundError,
    IsADirectoryError,
    EventFormatError,
    EventBoundsError,
    EventOrderError,
    CorruptCheckpointError,
    PgmError,
    domel.SyncError,
    TrainingError,
)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("evseg: a verb is required (synth, graph, train, predict, eval, label)")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())

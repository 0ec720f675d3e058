"""Glue between event streams and the network: per-window samples and stream prediction."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .events import EventStream, EventWindow, SensorGeometry, slice_windows
from .graph import MetricConfig, build_knn_graph
from .gtnn import GtnnModel, model_forward, predict_labels
from .training import Sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSpec:
    duration_us: int = 10_000
    n_max: int = 5000
    k: int = 16


def stream_samples(
    stream: EventStream,
    labels: np.ndarray,
    geometry: SensorGeometry,
    spec: WindowSpec,
    min_nodes: int,
) -> list[Sample]:
    """One training sample per window large enough for the model."""
    labels = np.asarray(labels)
    if len(labels) != len(stream):
        raise ValueError(f"{len(labels)} labels for {len(stream)} events")
    out = []
    for win in slice_windows(stream, spec.duration_us, spec.n_max):
        if len(win) < min_nodes:
            continue
        graph = build_knn_graph(win, k=spec.k, geometry=geometry)
        out.append(Sample(graph, labels[win.source_index].astype(np.int64)))
    return out


def _fill_dropped(win: EventWindow, kept_labels: np.ndarray, stream: EventStream, metric: MetricConfig) -> np.ndarray:
    """Labels for events removed by the cap, copied from the nearest kept event."""
    def pos(idx):
        return np.column_stack(
            [stream.x[idx], stream.y[idx], (stream.t[idx] - win.t_start) * metric.time_scale]
        ).astype(np.float64)

    _, nn = cKDTree(pos(win.source_index)).query(pos(win.dropped_index))
    return kept_labels[nn]


def predict_stream(
    model: GtnnModel,
    stream: EventStream,
    geometry: SensorGeometry,
    spec: WindowSpec,
    threads: int = 1,
) -> tuple[np.ndarray, list[EventWindow]]:
    """Per-event labels aligned with ``stream``; windows too small for the model stay 0.

    Windows are independent at inference time, so up to ``threads`` of them run concurrently.
    """
    labels = np.zeros(len(stream), dtype=np.int64)
    windows = slice_windows(stream, spec.duration_us, spec.n_max)
    model.training = False
    min_nodes = model.config.min_nodes()

    def one(wid: int) -> tuple[np.ndarray, np.ndarray | None] | None:
        win = windows[wid]
        if len(win) < min_nodes:
            if len(win):
                log.info("window %d has %d events (< %d); labeled background", wid, len(win), min_nodes)
            return None
        metric = MetricConfig.auto(geometry, win.t_end - win.t_start)
        graph = build_knn_graph(win, k=spec.k, metric=metric)
        kept = predict_labels(model_forward(model, graph))
        dropped = _fill_dropped(win, kept, stream, metric) if len(win.dropped_index) else None
        return kept, dropped

    if threads > 1 and len(windows) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(windows))))
    else:
        results = [one(w) for w in range(len(windows))]
    for win, res in zip(windows, results):
        if res is None:
            continue
        kept, dropped = res
        labels[win.source_index] = kept
        if dropped is not None:
            labels[win.dropped_index] = dropped
    return labels, windows

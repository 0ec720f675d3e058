"""Events-3D graphs: scaled (x, y, t) positions, exact kNN, farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .events import EventWindow, SensorGeometry

DEFAULT_K = 16


class InsufficientNodesError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    """Scale applied to microsecond offsets so time is measured in pixels."""

    time_scale: float

    def __post_init__(self):
        if not self.time_scale > 0:
            raise ValueError(f"time_scale must be positive, got {self.time_scale}")

    @classmethod
    def auto(cls, geometry: SensorGeometry, duration_us: float) -> "MetricConfig":
        """One window duration spans ``max(W, H)`` pixels of the time axis."""
        return cls(max(geometry.width, geometry.height) / float(duration_us))


@dataclass(frozen=True, eq=False)
class EventGraph:
    positions: np.ndarray  # (N, 3) x, y, t_scaled
    features: np.ndarray  # (N, F)
    neighbors: np.ndarray  # (N, k), never contains the row's own index
    k: int

    def __post_init__(self):
        for arr in (self.positions, self.features, self.neighbors):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.positions.shape[0]

    def permuted(self, perm: np.ndarray) -> "EventGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return EventGraph(
            self.positions[perm].copy(),
            self.features[perm].copy(),
            inv[self.neighbors[perm]],
            self.k,
        )


def spatiotemporal_distance(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.dot(d, d)))


def knn_indices(
    query: np.ndarray,
    ref: np.ndarray,
    k: int,
    exclude: np.ndarray | None = None,
) -> np.ndarray:
    """Exact k nearest ``ref`` rows for each ``query`` row.

    Ordered by distance, ties broken by smaller ref index. ``exclude[i]``
    (if given) is a ref index that query ``i`` may not select, used to keep
    a node out of its own neighborhood.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    n_ref = ref.shape[0]
    avail = n_ref - (1 if exclude is not None else 0)
    if k < 1 or k > avail:
        raise InsufficientNodesError(f"need more than {k} candidate nodes, have {avail}")
    want = k + (1 if exclude is not None else 0)
    margin = min(n_ref, want + 4)
    tree = cKDTree(ref)
    kd_d, kd_i = tree.query(query, k=margin)
    kd_d = kd_d.reshape(len(query), margin)
    kd_i = kd_i.reshape(len(query), margin)

    out = np.empty((len(query), k), dtype=np.int64)
    for r in range(len(query)):
        cand = kd_i[r]
        if exclude is not None:
            cand = cand[cand != exclude[r]]
        d2 = ((ref[cand] - query[r]) ** 2).sum(-1)
        order = np.lexsort((cand, d2))
        kth = d2[order[k - 1]]
        complete = margin == n_ref or kd_d[r, -1] ** 2 > kth * (1 + 1e-9) + 1e-12
        if not complete:
            # tie group runs past the margin; settle it exhaustively
            cand = np.arange(n_ref)
            if exclude is not None:
                cand = cand[cand != exclude[r]]
            d2 = ((ref[cand] - query[r]) ** 2).sum(-1)
            order = np.lexsort((cand, d2))
        out[r] = cand[order[:k]]
    return out


def knn_self(positions: np.ndarray, k: int) -> np.ndarray:
    n = positions.shape[0]
    if n <= k:
        raise InsufficientNodesError(f"graph has {n} nodes but k={k}; need N > k")
    return knn_indices(positions, positions, k, exclude=np.arange(n))


def window_positions(window: EventWindow, metric: MetricConfig) -> np.ndarray:
    ev = window.events
    return np.column_stack(
        [
            ev.x.astype(np.float64),
            ev.y.astype(np.float64),
            (ev.t - window.t_start).astype(np.float64) * metric.time_scale,
        ]
    )


def build_knn_graph(
    window: EventWindow,
    k: int = DEFAULT_K,
    metric: MetricConfig | None = None,
    geometry: SensorGeometry | None = None,
) -> EventGraph:
    if metric is None:
        if geometry is None:
            raise ValueError("either a metric or a geometry (for the automatic scale) is required")
        metric = MetricConfig.auto(geometry, window.t_end - window.t_start)
    ev = window.events
    if geometry is not None and len(ev):
        if ev.x.max() >= geometry.width or ev.y.max() >= geometry.height or ev.x.min() < 0 or ev.y.min() < 0:
            raise ValueError("window events fall outside the sensor geometry")
    pos = window_positions(window, metric)
    neighbors = knn_self(pos, k)
    return EventGraph(pos, pos.copy(), neighbors, k)


def graph_from_positions(positions: np.ndarray, k: int = DEFAULT_K) -> EventGraph:
    pos = np.array(positions, dtype=np.float64)
    return EventGraph(pos, pos.copy(), knn_self(pos, k), k)


def farthest_point_sampling(positions: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min-distance subset, seeded at the earliest node.

    Ties (equal t for the seed, equal distance later) go to the smaller index.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} nodes")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = int(np.argmin(pos[:, 2]))
    best = ((pos - pos[chosen[0]]) ** 2).sum(-1)
    best[chosen[0]] = -np.inf  # duplicates of a chosen node stay eligible, the node itself does not
    for s in range(1, m):
        nxt = int(np.argmax(best))
        chosen[s] = nxt
        np.minimum(best, ((pos - pos[nxt]) ** 2).sum(-1), out=best)
        best[nxt] = -np.inf
    return chosen


def format_edge_list(graph: EventGraph) -> str:
    """Debug dump: one ``i j distance`` line per directed kNN edge."""
    lines = []
    for i, row in enumerate(graph.neighbors):
        for j in row:
            d = spatiotemporal_distance(graph.positions[i], graph.positions[j])
            lines.append(f"{i} {int(j)} {d:.6f}")
    return "\n".join(lines) + "\n"


def write_edge_list(path: str | Path, graph: EventGraph) -> None:
    Path(path).write_text(format_edge_list(graph), encoding="utf-8")

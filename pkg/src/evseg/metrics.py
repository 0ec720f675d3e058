"""Segmentation scores: confusion counts, convex-hull IoU and detection rate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .events import EventStream, EventWindow, SensorGeometry


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/ground-truth length mismatch: {pred.shape} vs {gt.shape}")
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)),
        fp=int(np.sum(pred & ~gt)),
        tn=int(np.sum(~pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def scores(counts: ConfusionCounts) -> dict[str, float]:
    """Recall, precision and F1 as fractions; every 0/0 reads as 0."""
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return {"recall": recall, "precision": precision, "f1": f1}


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True, eq=False)
class SegMask:
    bitmap: np.ndarray  # (H, W) bool, indexed [y, x]
    provenance: str = "hull"  # "hull" or "labels"

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull of integer points (monotone chain), no collinear vertices."""
    pts = np.unique(np.asarray(points, dtype=np.int64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(tuple(p))
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(tuple(p))
    hull = lower[:-1] + upper[:-1]
    return np.asarray(hull, dtype=np.int64)


def hull_mask(points: np.ndarray, geometry: SensorGeometry) -> SegMask:
    """Fill every pixel whose center is inside or on the hull of ``points`` (x, y).

    A collinear hull becomes a one-pixel-wide segment; no points, an empty mask.
    """
    mask = np.zeros((geometry.height, geometry.width), dtype=bool)
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        return SegMask(mask)
    hull = convex_hull(pts)
    x0, y0 = hull.min(axis=0)
    x1, y1 = hull.max(axis=0)
    x0, y0 = max(int(x0), 0), max(int(y0), 0)
    x1, y1 = min(int(x1), geometry.width - 1), min(int(y1), geometry.height - 1)
    if x0 > x1 or y0 > y1:
        return SegMask(mask)
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    if len(hull) == 1:
        inside = (xs == hull[0, 0]) & (ys == hull[0, 1])
    elif len(hull) == 2:
        a, b = hull[0].astype(np.float64), hull[1].astype(np.float64)
        ab = b - a
        t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / float(ab @ ab), 0.0, 1.0)
        dx = xs - (a[0] + t * ab[0])
        dy = ys - (a[1] + t * ab[1])
        inside = dx * dx + dy * dy <= 0.25 + 1e-12
    else:
        inside = np.ones_like(xs, dtype=bool)
        for i in range(len(hull)):
            (ax, ay), (bx, by) = hull[i], hull[(i + 1) % len(hull)]
            inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
    mask[y0 : y1 + 1, x0 : x1 + 1] = inside
    return SegMask(mask)


def iou(pred: SegMask, gt: SegMask) -> float:
    """Intersection over union; two empty masks score 1."""
    if pred.bitmap.shape != gt.bitmap.shape:
        raise ValueError(f"mask geometry mismatch: {pred.bitmap.shape} vs {gt.bitmap.shape}")
    union = int(np.sum(pred.bitmap | gt.bitmap))
    if union == 0:
        return 1.0
    return int(np.sum(pred.bitmap & gt.bitmap)) / union


# ---------------------------------------------------------------------------
# detection rate


@dataclass(frozen=True)
class DetectionBox:
    """Inclusive pixel rectangle."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    object_id: int | None = None

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def intersection(self, other: "DetectionBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min) + 1
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min) + 1
        return max(w, 0) * max(h, 0)

    def shifted(self, dx: int, dy: int) -> "DetectionBox":
        return DetectionBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy, self.object_id)

    @classmethod
    def around(cls, xs: np.ndarray, ys: np.ndarray, object_id: int | None = None) -> "DetectionBox":
        return cls(int(np.min(xs)), int(np.min(ys)), int(np.max(xs)), int(np.max(ys)), object_id)


def detection_success(pred: DetectionBox, gt: DetectionBox) -> bool:
    """Covers more than half of the truth, and more truth than non-truth."""
    inter = pred.intersection(gt)
    outside = pred.area - inter
    return inter / gt.area > 0.5 and inter > outside


def match_detections(preds: Sequence[DetectionBox], gts: Sequence[DetectionBox]) -> list[bool]:
    """Success flag for each ground-truth box after greedy one-to-one matching.

    Pairs are taken in order of decreasing coverage of the truth; when both
    boxes carry object ids only equal ids may pair.
    """
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.object_id is not None and g.object_id is not None and p.object_id != g.object_id:
                continue
            cover = p.intersection(g) / g.area
            pairs.append((-cover, j, i))
    pairs.sort()
    used_p: set[int] = set()
    flags = [False] * len(gts)
    matched_g: set[int] = set()
    for neg_cover, j, i in pairs:
        if i in used_p or j in matched_g or neg_cover == 0:
            continue
        used_p.add(i)
        matched_g.add(j)
        flags[j] = detection_success(preds[i], gts[j])
    return flags


def detection_rate(
    windows: Iterable[tuple[Sequence[DetectionBox], Sequence[DetectionBox]]],
) -> tuple[list[list[bool]], float]:
    """Per-window success flags and the aggregate rate in percent."""
    flags = [match_detections(p, g) for p, g in windows]
    total = sum(len(f) for f in flags)
    hits = sum(sum(f) for f in flags)
    return flags, (100.0 * hits / total if total else 0.0)


def boxes_from_labels(xs: np.ndarray, ys: np.ndarray, labels: np.ndarray, object_ids: np.ndarray | None = None) -> list[DetectionBox]:
    """Bounding boxes of foreground events, one per object id when ids are given."""
    fg = np.asarray(labels) == 1
    if not fg.any():
        return []
    if object_ids is None or not np.any(object_ids[fg] > 0):
        return [DetectionBox.around(xs[fg], ys[fg])]
    boxes = []
    for oid in np.unique(object_ids[fg]):
        sel = fg & (object_ids == oid)
        boxes.append(DetectionBox.around(xs[sel], ys[sel], int(oid) if oid > 0 else None))
    return boxes


# ---------------------------------------------------------------------------
# per-window evaluation report


@dataclass
class WindowScore:
    window_id: int
    iou: float
    dr_hits: int
    dr_total: int
    counts: ConfusionCounts
    intersection: int
    union: int


@dataclass
class EvalReport:
    windows: list[WindowScore]

    @property
    def counts(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for w in self.windows:
            total = total + w.counts
        return total

    @property
    def mean_iou(self) -> float:
        return float(np.mean([w.iou for w in self.windows])) if self.windows else 0.0

    @property
    def pooled_iou(self) -> float:
        inter = sum(w.intersection for w in self.windows)
        union = sum(w.union for w in self.windows)
        return inter / union if union else 1.0

    @property
    def detection_rate(self) -> float:
        total = sum(w.dr_total for w in self.windows)
        return 100.0 * sum(w.dr_hits for w in self.windows) / total if total else 0.0

    def summary(self) -> dict[str, float]:
        s = scores(self.counts)
        return {
            "windows": len(self.windows),
            "mean_iou": self.mean_iou,
            "sequence_iou": self.pooled_iou,
            "dr_percent": self.detection_rate,
            "f1": s["f1"],
            "recall": s["recall"],
            "precision": s["precision"],
        }

    def to_csv(self, metrics: Sequence[str] = ("f1", "iou", "dr")) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["window_id", "iou", "dr_success", "tp", "fp", "tn", "fn"])
        for w in self.windows:
            writer.writerow(
                [
                    w.window_id,
                    f"{w.iou:.6f}" if "iou" in metrics else "",
                    (f"{w.dr_hits}/{w.dr_total}" if w.dr_total else "") if "dr" in metrics else "",
                    w.counts.tp,
                    w.counts.fp,
                    w.counts.tn,
                    w.counts.fn,
                ]
            )
        summ = self.summary()
        wanted = {"windows"}
        if "iou" in metrics:
            wanted |= {"mean_iou", "sequence_iou"}
        if "dr" in metrics:
            wanted.add("dr_percent")
        if "f1" in metrics:
            wanted |= {"f1", "recall", "precision"}
        parts = [f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in summ.items() if k in wanted]
        buf.write("# summary " + " ".join(parts) + "\n")
        return buf.getvalue()


def evaluate_windows(
    stream: EventStream,
    windows: Sequence[EventWindow],
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    geometry: SensorGeometry,
    gt_ids: np.ndarray | None = None,
    pred_ids: np.ndarray | None = None,
    skip_empty: bool = True,
) -> EvalReport:
    """Score stream-aligned label arrays window by window.

    Window membership comes from ``source_index``/``dropped_index`` so events
    removed by the count cap are still scored. Windows without events are
    skipped unless ``skip_empty`` is false.
    """
    rows = []
    for wid, win in enumerate(windows):
        idx = np.concatenate([win.dropped_index, win.source_index]).astype(np.int64)
        if skip_empty and len(idx) == 0:
            continue
        # dropped events precede kept ones in time, so stream order is preserved
        idx.sort()
        p, g = pred_labels[idx], gt_labels[idx]
        xs, ys = stream.x[idx], stream.y[idx]
        pts = np.column_stack([xs, ys])
        mp = hull_mask(pts[p == 1], geometry)
        mg = hull_mask(pts[g == 1], geometry)
        gboxes = boxes_from_labels(xs, ys, g, None if gt_ids is None else gt_ids[idx])
        pboxes = boxes_from_labels(xs, ys, p, None if pred_ids is None else pred_ids[idx])
        flags = match_detections(pboxes, gboxes)
        rows.append(
            WindowScore(
                window_id=wid,
                iou=iou(mp, mg),
                dr_hits=sum(flags),
                dr_total=len(flags),
                counts=confusion(p, g),
                intersection=int(np.sum(mp.bitmap & mg.bitmap)),
                union=int(np.sum(mp.bitmap | mg.bitmap)),
            )
        )
    return EvalReport(rows)

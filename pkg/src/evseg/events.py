"""Event records, text I/O, and temporal windowing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np


class EventFormatError(ValueError):
    """Malformed event or label text."""


class EventBoundsError(ValueError):
    """Event coordinates fall outside the sensor geometry."""


class EventOrderError(ValueError):
    """Events are not sorted by timestamp."""


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor geometry must be positive, got {self.width}x{self.height}")


class Event(NamedTuple):
    t: int  # microseconds
    x: int
    y: int
    p: int  # -1 or +1


@dataclass(frozen=True)
class EventStream:
    """Column-oriented sequence of events (int64 columns of equal length)."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "EventStream":
        rows = list(events)
        if not rows:
            return cls.empty()
        arr = np.asarray(rows, dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @classmethod
    def empty(cls) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index: np.ndarray) -> "EventStream":
        return EventStream(self.t[index], self.x[index], self.y[index], self.p[index])

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))


@dataclass(frozen=True)
class EventWindow:
    """A capped temporal slice ``[t_start, t_end)`` of a stream.

    ``source_index`` maps each kept event back to its position in the stream
    the window was sliced from; ``dropped_index`` lists in-window events
    removed by the ``n_max`` cap.
    """

    events: EventStream
    t_start: int
    t_end: int
    n_max: int
    source_index: np.ndarray
    dropped_index: np.ndarray

    def __len__(self) -> int:
        return len(self.events)


_SPLIT = re.compile(r"[,\s]+")
_GEOMETRY = re.compile(r"#\s*geometry\s+(\d+)\s+(\d+)", re.IGNORECASE)


def _fields(line: str) -> list[str]:
    return [f for f in _SPLIT.split(line.strip()) if f]


def parse_events(lines: str | Iterable[str], geometry: SensorGeometry) -> EventStream:
    """Parse ``t,x,y,p`` records (comma or whitespace separated).

    ``#`` lines are skipped, as is a single non-numeric header line before
    the first record. Polarity 0/1 maps to -1/+1.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    rows: list[tuple[int, int, int, int]] = []
    header_allowed = True
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = _fields(line)
        try:
            if len(parts) != 4:
                raise ValueError
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            if header_allowed and not rows:
                header_allowed = False
                continue
            raise EventFormatError(f"line {lineno}: expected 't,x,y,p' integers, got {line!r}") from None
        header_allowed = False
        if p == 0:
            p = -1
        elif p not in (1, -1):
            raise EventFormatError(f"line {lineno}: polarity must be in {{-1, 0, 1}}, got {p}")
        if t < 0:
            raise EventFormatError(f"line {lineno}: negative timestamp {t}")
        if not (0 <= x < geometry.width and 0 <= y < geometry.height):
            raise EventBoundsError(
                f"line {lineno}: ({x}, {y}) outside {geometry.width}x{geometry.height} sensor"
            )
        rows.append((t, x, y, p))
    return EventStream.from_events(rows)


def format_events(stream: EventStream, geometry: SensorGeometry | None = None) -> str:
    out = []
    if geometry is not None:
        out.append(f"# geometry {geometry.width} {geometry.height}")
    out.extend(f"{t},{x},{y},{p}" for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p))
    return "\n".join(out) + "\n"


def read_geometry_hint(path: str | Path) -> SensorGeometry | None:
    """Return the geometry declared by a ``# geometry W H`` comment, if any."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if not s.startswith("#"):
                return None
            m = _GEOMETRY.match(s)
            if m:
                return SensorGeometry(int(m.group(1)), int(m.group(2)))
    return None


def read_events(path: str | Path, geometry: SensorGeometry | None = None) -> tuple[EventStream, SensorGeometry]:
    if geometry is None:
        geometry = read_geometry_hint(path)
        if geometry is None:
            raise EventFormatError(f"{path}: no '# geometry W H' line; pass the sensor size explicitly")
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh, geometry), geometry


def write_events(path: str | Path, stream: EventStream, geometry: SensorGeometry | None = None) -> None:
    Path(path).write_text(format_events(stream, geometry), encoding="utf-8")


# ---------------------------------------------------------------------------
# labels


def parse_labels(lines: str | Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
    """Parse a label file into ``(labels, object_ids)``.

    Each line is ``label`` or ``label,object_id``; missing ids read as 0.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    labels, ids = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = _fields(line)
        try:
            if len(parts) not in (1, 2):
                raise ValueError
            lab = int(parts[0])
            oid = int(parts[1]) if len(parts) == 2 else 0
        except ValueError:
            raise EventFormatError(f"line {lineno}: expected 'label[,object_id]', got {line!r}") from None
        if lab not in (0, 1) or oid < 0:
            raise EventFormatError(f"line {lineno}: label must be 0/1 and object id >= 0")
        labels.append(lab)
        ids.append(oid)
    return np.asarray(labels, dtype=np.int64), np.asarray(ids, dtype=np.int64)


def format_labels(labels: np.ndarray, object_ids: np.ndarray | None = None) -> str:
    if object_ids is None:
        body = "\n".join(str(int(v)) for v in labels)
    else:
        body = "\n".join(f"{int(v)},{int(o)}" for v, o in zip(labels, object_ids))
    return body + "\n" if len(labels) else ""


def read_labels(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        return parse_labels(fh)


def write_labels(path: str | Path, labels: np.ndarray, object_ids: np.ndarray | None = None) -> None:
    Path(path).write_text(format_labels(labels, object_ids), encoding="utf-8")


# ---------------------------------------------------------------------------
# windowing


def slice_windows(stream: EventStream, duration: int, n_max: int) -> list[EventWindow]:
    """Tile the stream into back-to-back windows of ``duration`` microseconds.

    Windows are aligned to multiples of ``duration`` and run from the first
    to the last occupied slot, so interior empty windows are kept. A window
    over ``n_max`` keeps its latest ``n_max`` events.
    """
    if duration <= 0 or n_max <= 0:
        raise ValueError("duration and n_max must be positive")
    if not stream.is_sorted():
        raise EventOrderError("events must be sorted by timestamp")
    if len(stream) == 0:
        return []
    slot = stream.t // duration
    first, last = int(slot[0]), int(slot[-1])
    bounds = np.searchsorted(slot, np.arange(first, last + 2), side="left")
    windows = []
    for j, w in enumerate(range(first, last + 1)):
        lo, hi = int(bounds[j]), int(bounds[j + 1])
        keep_lo = max(lo, hi - n_max)
        kept = np.arange(keep_lo, hi)
        windows.append(
            EventWindow(
                events=stream.take(kept),
                t_start=w * duration,
                t_end=(w + 1) * duration,
                n_max=n_max,
                source_index=kept,
                dropped_index=np.arange(lo, keep_lo),
            )
        )
    return windows


def sort_events(stream: EventStream) -> tuple[EventStream, np.ndarray]:
    """Stable sort by timestamp; returns the sorted stream and the permutation."""
    order = np.argsort(stream.t, kind="stable")
    return stream.take(order), order

"""Binary PGM (P5) frames and object masks stored as ``<timestamp_us>.pgm`` files."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


@dataclass(frozen=True)
class ApsFrame:
    timestamp_us: int
    image: np.ndarray  # (H, W) uint8


@dataclass(frozen=True)
class ObjectMask:
    timestamp_us: int
    ids: np.ndarray  # (H, W) uint8, 0 = background, >0 = object id


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PgmError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PgmError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 256:
        raise PgmError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise PgmError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise PgmError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 255):
        raise PgmError("PGM pixel values must be within 0..255")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes())


def _timestamped(directory: Path) -> list[tuple[int, Path]]:
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    out = []
    for p in directory.glob("*.pgm"):
        try:
            out.append((int(p.stem), p))
        except ValueError:
            raise PgmError(f"{p}: file name must be an integer timestamp in microseconds") from None
    return sorted(out)


def read_frame_dir(directory: str | Path) -> list[ApsFrame]:
    return [ApsFrame(ts, read_pgm(p)) for ts, p in _timestamped(Path(directory))]


def read_mask_dir(directory: str | Path) -> list[ObjectMask]:
    return [ObjectMask(ts, read_pgm(p)) for ts, p in _timestamped(Path(directory))]


def write_frame_dir(directory: str | Path, frames: list[ApsFrame]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_pgm(d / f"{f.timestamp_us}.pgm", f.image)


def write_mask_dir(directory: str | Path, masks: list[ObjectMask]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m in masks:
        write_pgm(d / f"{m.timestamp_us}.pgm", m.ids)

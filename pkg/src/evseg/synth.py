"""Synthetic labeled event streams: a panning textured background plus moving objects.

Log intensity is rendered at a fixed simulation rate; a pixel fires each time
its log intensity has moved by the contrast threshold since its last event,
with the timestamp placed by linear interpolation between simulation frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .events import EventStream, SensorGeometry, sort_events, write_events, write_labels
from .pgm import ApsFrame, ObjectMask, write_frame_dir, write_mask_dir

_TEXTURE_SIZE = 128


@dataclass(frozen=True)
class ObjectSpec:
    shape: str = "disc"  # "disc" or "rect"
    size: float = 10.0  # radius for discs, half-width for rects (px)
    velocity: tuple[float, float] = (0.0, 0.0)  # px/s in image coordinates
    start: tuple[float, float] = (32.0, 24.0)  # center at t=0 (px)

    def __post_init__(self):
        if self.shape not in ("disc", "rect"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        if self.size <= 0:
            raise ValueError("object size must be positive")

    def center(self, t_s: float) -> tuple[float, float]:
        return (self.start[0] + self.velocity[0] * t_s, self.start[1] + self.velocity[1] * t_s)


@dataclass(frozen=True)
class SceneConfig:
    geometry: SensorGeometry = field(default_factory=lambda: SensorGeometry(64, 48))
    duration_us: int = 60_000
    pan_velocity: tuple[float, float] = (0.0, 0.0)  # px/s; the scene slides by -v
    objects: tuple[ObjectSpec, ...] = ()
    texture_seed: int = 0
    contrast_threshold: float = 0.5
    noise_rate: float = 0.0  # events / pixel / second
    sim_rate_hz: float = 1000.0
    frame_interval_us: int = 10_000  # spacing of exported APS frames and masks
    texture_scale: float = 3.0  # smoothing (px) before thresholding

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.duration_us <= 0 or self.sim_rate_hz <= 0:
            raise ValueError("duration and simulation rate must be positive")


@dataclass
class SynthSequence:
    config: SceneConfig
    events: EventStream
    labels: np.ndarray
    object_ids: np.ndarray
    frames: list[ApsFrame]
    masks: list[ObjectMask]
    sim_times_us: np.ndarray
    _coverage: list[np.ndarray] = field(default_factory=list, repr=False)

    def coverage_ids(self, sim_index: int) -> np.ndarray:
        """(H, W) id of the topmost object with any coverage at a simulation frame."""
        return self._coverage[sim_index]


def _texture(rng: np.random.Generator, scale: float, lo: float, hi: float) -> np.ndarray:
    noise = rng.standard_normal((_TEXTURE_SIZE, _TEXTURE_SIZE))
    smooth = ndimage.gaussian_filter(noise, scale, mode="wrap")
    binary = np.where(smooth > np.median(smooth), hi, lo)
    # slight blur keeps sub-pixel resampling well behaved
    return ndimage.gaussian_filter(binary, 0.7, mode="wrap")


def _sample(tex: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(tex, [ys.ravel(), xs.ravel()], order=1, mode="grid-wrap").reshape(xs.shape)


def _coverage(spec: ObjectSpec, cx: float, cy: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Antialiased fraction of each pixel covered by the object."""
    if spec.shape == "disc":
        d = np.hypot(xs - cx, ys - cy)
        return np.clip(spec.size - d + 0.5, 0.0, 1.0)
    cov_x = np.clip(spec.size - np.abs(xs - cx) + 0.5, 0.0, 1.0)
    cov_y = np.clip(spec.size - np.abs(ys - cy) + 0.5, 0.0, 1.0)
    return cov_x * cov_y


def _render(config: SceneConfig, bg: np.ndarray, obj_tex: list[np.ndarray], t_s: float, xs, ys):
    vx, vy = config.pan_velocity
    intensity = _sample(bg, xs + vx * t_s, ys + vy * t_s)
    ids = np.zeros(xs.shape, dtype=np.int64)
    for oid, (spec, tex) in enumerate(zip(config.objects, obj_tex), start=1):
        cx, cy = spec.center(t_s)
        cov = _coverage(spec, cx, cy, xs, ys)
        if not cov.any():
            continue
        # texture is attached to the object so it travels with it
        inner = _sample(tex, xs - cx, ys - cy)
        intensity = (1.0 - cov) * intensity + cov * inner
        ids[cov > 0] = oid
    return intensity, ids


def _hard_mask(config: SceneConfig, t_s: float, xs, ys) -> np.ndarray:
    ids = np.zeros(xs.shape, dtype=np.int64)
    for oid, spec in enumerate(config.objects, start=1):
        cx, cy = spec.center(t_s)
        ids[_coverage(spec, cx, cy, xs, ys) >= 0.5] = oid
    return ids


def generate(config: SceneConfig, seed: int = 0) -> SynthSequence:
    """Simulate the scene; deterministic for a given config and seed."""
    rng = np.random.default_rng([config.texture_seed, seed])
    g = config.geometry
    ys, xs = np.mgrid[0 : g.height, 0 : g.width].astype(np.float64)
    bg = _texture(rng, config.texture_scale, 0.2, 0.8)
    obj_tex = [_texture(rng, config.texture_scale, 0.35, 1.0) for _ in config.objects]

    dt_us = 1e6 / config.sim_rate_hz
    n_steps = int(np.floor(config.duration_us / dt_us))
    sim_times = np.arange(n_steps + 1) * dt_us

    C = config.contrast_threshold
    intensity, cov_prev = _render(config, bg, obj_tex, 0.0, xs, ys)
    log_prev = np.log(intensity)
    ref = log_prev.copy()
    coverages = [cov_prev]

    chunks_t, chunks_x, chunks_y, chunks_p, chunks_id = [], [], [], [], []
    flat_x = xs.ravel().astype(np.int64)
    flat_y = ys.ravel().astype(np.int64)
    for k in range(1, n_steps + 1):
        t0, t1 = sim_times[k - 1], sim_times[k]
        intensity, cov_now = _render(config, bg, obj_tex, t1 * 1e-6, xs, ys)
        log_now = np.log(intensity)
        coverages.append(cov_now)
        cause = np.where(cov_now > 0, cov_now, cov_prev).ravel()
        diff = (log_now - log_prev).ravel()
        r = ref.ravel()
        lp = log_prev.ravel()
        for sign in (1, -1):
            count = np.floor(sign * (log_now.ravel() - r) / C).astype(np.int64)
            count[count < 0] = 0
            pix = np.nonzero(count)[0]
            if len(pix) == 0:
                continue
            reps = count[pix]
            pix_rep = np.repeat(pix, reps)
            j = np.concatenate([np.arange(1, c + 1) for c in reps])
            level = r[pix_rep] + sign * C * j
            frac = (level - lp[pix_rep]) / diff[pix_rep]
            ts = np.rint(t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)).astype(np.int64)
            chunks_t.append(ts)
            chunks_x.append(flat_x[pix_rep])
            chunks_y.append(flat_y[pix_rep])
            chunks_p.append(np.full(len(pix_rep), sign, dtype=np.int64))
            chunks_id.append(cause[pix_rep])
            r[pix] += sign * C * reps
        ref = r.reshape(ref.shape)
        if config.noise_rate > 0:
            lam = config.noise_rate * g.width * g.height * (t1 - t0) * 1e-6
            n_noise = rng.poisson(lam)
            if n_noise:
                chunks_t.append(rng.integers(int(t0), int(t1), n_noise, endpoint=False).astype(np.int64) + 1)
                chunks_x.append(rng.integers(0, g.width, n_noise))
                chunks_y.append(rng.integers(0, g.height, n_noise))
                chunks_p.append(rng.choice(np.array([-1, 1]), n_noise))
                chunks_id.append(np.zeros(n_noise, dtype=np.int64))
        log_prev = log_now
        cov_prev = cov_now

    if chunks_t:
        stream = EventStream(
            np.concatenate(chunks_t), np.concatenate(chunks_x), np.concatenate(chunks_y), np.concatenate(chunks_p)
        )
        ids = np.concatenate(chunks_id).astype(np.int64)
        stream, order = sort_events(stream)
        ids = ids[order]
    else:
        stream = EventStream.empty()
        ids = np.zeros(0, dtype=np.int64)

    frames, masks = [], []
    for ft in range(0, config.duration_us + 1, config.frame_interval_us):
        inten, _ = _render(config, bg, obj_tex, ft * 1e-6, xs, ys)
        frames.append(ApsFrame(int(ft), np.clip(np.rint(inten * 255), 0, 255).astype(np.uint8)))
        masks.append(ObjectMask(int(ft), _hard_mask(config, ft * 1e-6, xs, ys).astype(np.uint8)))
    return SynthSequence(
        config=config,
        events=stream,
        labels=(ids > 0).astype(np.int64),
        object_ids=ids,
        frames=frames,
        masks=masks,
        sim_times_us=sim_times,
        _coverage=coverages,
    )


def random_scene(
    seed: int,
    n_objects: int = 1,
    geometry: SensorGeometry | None = None,
    duration_us: int = 60_000,
    noise_rate: float = 0.0,
    pan_speed: tuple[float, float] = (100.0, 200.0),
    object_speed: tuple[float, float] = (400.0, 600.0),
    object_size: tuple[float, float] = (0.25, 0.4),
) -> SceneConfig:
    """Scene with a panning camera and ``n_objects`` objects moving against it."""
    geometry = geometry or SensorGeometry(64, 48)
    rng = np.random.default_rng(seed)
    w, h = geometry.width, geometry.height
    pan_v = rng.uniform(*pan_speed)
    pan_dir = rng.uniform(0, 2 * np.pi)
    pan = (pan_v * np.cos(pan_dir), pan_v * np.sin(pan_dir))
    objects = []
    for _ in range(n_objects):
        # size is a fraction of the shorter sensor side
        size = rng.uniform(*object_size) * min(w, h)
        # objects move roughly against the pan so their motion is distinct
        ang = pan_dir + np.pi + rng.uniform(-np.pi / 2, np.pi / 2)
        speed = rng.uniform(*object_speed)
        vel = (speed * np.cos(ang), speed * np.sin(ang))
        dur = duration_us * 1e-6
        # keep the object inside the frame over the whole sequence
        mid = (rng.uniform(0.35, 0.65) * w, rng.uniform(0.35, 0.65) * h)
        start = (mid[0] - vel[0] * dur / 2, mid[1] - vel[1] * dur / 2)
        objects.append(ObjectSpec(str(rng.choice(["disc", "rect"])), float(size), vel, start))
    return SceneConfig(
        geometry=geometry,
        duration_us=duration_us,
        pan_velocity=pan,
        objects=tuple(objects),
        texture_seed=int(rng.integers(1 << 31)),
        noise_rate=noise_rate,
    )


def write_sequence(seq: SynthSequence, out_dir: str | Path) -> Path:
    """Write events.txt, labels.txt, frames/ and masks/ under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "events.txt", seq.events, seq.config.geometry)
    write_labels(out / "labels.txt", seq.labels, seq.object_ids)
    write_frame_dir(out / "frames", seq.frames)
    write_mask_dir(out / "masks", seq.masks)
    return out

"""Mask-based event labeling: frame sync, edge extraction, rigid 2D ICP, mask lookup.

Events between two APS frames are first aligned to the Canny edges of the
earlier frame, then refined against the boundary of its object mask, and
finally labeled by looking up the mask at their aligned positions.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .events import EventStream
from .pgm import ApsFrame, ObjectMask

log = logging.getLogger(__name__)


class SyncError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synchronization


def synchronize(event_t: np.ndarray, frame_times: Sequence[int]) -> np.ndarray:
    """Frame index per event: frame ``i`` owns ``[f_i, f_{i+1})``.

    Events before the first frame are assigned to the first frame.
    """
    ft = np.asarray(frame_times, dtype=np.int64)
    if len(ft) == 0:
        raise SyncError("no APS frames to synchronize against")
    if np.any(np.diff(ft) <= 0):
        raise SyncError("frame timestamps must be strictly increasing")
    idx = np.searchsorted(ft, np.asarray(event_t, dtype=np.int64), side="right") - 1
    return np.maximum(idx, 0)


# ---------------------------------------------------------------------------
# edges


def _canny(image: np.ndarray, sigma: float, low: float, high: float):
    if low > high:
        raise ValueError("low threshold must not exceed the high threshold")
    img = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(np.int64)) % 4
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    fwd_all = np.zeros_like(mag)
    bwd_all = np.zeros_like(mag)
    for s, (dy, dx) in enumerate(_SECTOR_STEP):
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag > bwd)
        fwd_all[sel] = fwd[sel]
        bwd_all[sel] = bwd[sel]
    keep &= mag > 0

    weak = keep & (mag >= low)
    strong = keep & (mag >= high)
    comp, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(comp[strong])] = True
    good[0] = False
    return good[comp], mag, fwd_all, bwd_all, sector


# forward neighbour step (dy, dx) per gradient sector: 0, 45, 90, 135 degrees
_SECTOR_STEP = [(0, 1), (1, 1), (1, 0), (1, -1)]


def canny_edges(image: np.ndarray, sigma: float = 1.4, low: float = 10.0, high: float = 30.0) -> np.ndarray:
    """Boolean edge map of an 8-bit style intensity image.

    Gradients are Sobel responses divided by 8 (intensity units per pixel).
    Non-maximum suppression keeps a pixel that is >= its forward neighbour
    and > its backward neighbour along the quantized gradient, so a plateau
    of two equal responses yields a single-pixel line.
    """
    return _canny(image, sigma, low, high)[0]


def subpixel_edges(image: np.ndarray, sigma: float = 1.4, low: float = 10.0, high: float = 30.0) -> np.ndarray:
    """(M, 2) edge positions refined by a parabola through the magnitude along the gradient."""
    edges, mag, fwd, bwd, sector = _canny(image, sigma, low, high)
    ys, xs = np.nonzero(edges)
    m, f, b = mag[ys, xs], fwd[ys, xs], bwd[ys, xs]
    curv = b - 2.0 * m + f
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(curv < 0, 0.5 * (b - f) / curv, 0.0)
    off = np.clip(off, -0.5, 0.5)
    step = np.array(_SECTOR_STEP, dtype=np.float64)[sector[ys, xs]]
    return np.column_stack([xs + off * step[:, 1], ys + off * step[:, 0]])


def edge_points(edges: np.ndarray) -> np.ndarray:
    """(M, 2) float (x, y) coordinates of the set pixels."""
    ys, xs = np.nonzero(edges)
    return np.column_stack([xs, ys]).astype(np.float64)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """(M, 2) sub-pixel contour: the midpoint of every 4-neighbour pair with differing ids, one side non-zero."""
    m = np.asarray(mask)
    out = []
    for axis in (0, 1):
        a = m[:-1, :] if axis == 0 else m[:, :-1]
        b = m[1:, :] if axis == 0 else m[:, 1:]
        ys, xs = np.nonzero((a != b) & ((a > 0) | (b > 0)))
        if axis == 0:
            out.append(np.column_stack([xs, ys + 0.5]))
        else:
            out.append(np.column_stack([xs + 0.5, ys]))
    return np.concatenate(out).astype(np.float64)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of a non-zero mask that touch a pixel with a different id (4-connectivity)."""
    m = np.asarray(mask)
    padded = np.pad(m, 1, mode="edge")
    h, w = m.shape
    diff = np.zeros(m.shape, dtype=bool)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        diff |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] != m
    return diff & (m > 0)


# ---------------------------------------------------------------------------
# rigid 2D registration


@dataclass(frozen=True)
class RigidTransform2D:
    theta: float = 0.0  # radians, counter-clockwise in (x, y)
    tx: float = 0.0
    ty: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return pts @ self.rotation.T + np.array([self.tx, self.ty])

    def compose(self, first: "RigidTransform2D") -> "RigidTransform2D":
        """``self`` after ``first``."""
        t = self.rotation @ np.array([first.tx, first.ty]) + np.array([self.tx, self.ty])
        return RigidTransform2D(_wrap(self.theta + first.theta), float(t[0]), float(t[1]))

    def inverse(self) -> "RigidTransform2D":
        t = -(self.rotation.T @ np.array([self.tx, self.ty]))
        return RigidTransform2D(-self.theta, float(t[0]), float(t[1]))


def _wrap(theta: float) -> float:
    return (theta + math.pi) % (2 * math.pi) - math.pi


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform2D:
    """Least-squares rotation and translation mapping ``src`` rows onto ``dst`` rows.

    If the centered source has no spread the rotation is unobservable and a
    pure translation is returned.
    """
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    sin_sum = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    cos_sum = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    if np.abs(a).max(initial=0.0) < 1e-12 or (abs(sin_sum) < 1e-12 and abs(cos_sum) < 1e-12):
        t = mu_d - mu_s
        return RigidTransform2D(0.0, float(t[0]), float(t[1]))
    theta = math.atan2(sin_sum, cos_sum)
    c, s = math.cos(theta), math.sin(theta)
    t = mu_d - np.array([c * mu_s[0] - s * mu_s[1], s * mu_s[0] + c * mu_s[1]])
    return RigidTransform2D(theta, float(t[0]), float(t[1]))


@dataclass
class IcpResult:
    transform: RigidTransform2D
    residuals: list[float] = field(default_factory=list)  # RMS after init and after each iteration
    iterations: int = 0
    converged: bool = False

    @property
    def rms(self) -> float:
        return self.residuals[-1]


def icp_2d(
    source: np.ndarray,
    target: np.ndarray,
    max_iters: int = 30,
    tol: float = 1e-4,
    init: str | RigidTransform2D = "centroid",
) -> IcpResult:
    """Point-to-point ICP mapping ``source`` onto ``target``.

    ``init`` is a transform, "identity", or "centroid" (translate the source
    centroid onto the target centroid). Each iteration refits the full
    transform to the current closest-point pairs and is accepted only if the
    RMS residual does not grow, so the residual sequence is non-increasing.
    Stops when the improvement falls below ``tol`` or after ``max_iters``.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty source and target point sets")
    if isinstance(init, RigidTransform2D):
        T = init
    elif init == "identity":
        T = RigidTransform2D()
    elif init == "centroid":
        d = tgt.mean(axis=0) - src.mean(axis=0)
        T = RigidTransform2D(0.0, float(d[0]), float(d[1]))
    else:
        raise ValueError(f"unknown ICP init {init!r}")
    return _icp_core([(src, tgt)], T, max_iters, tol)


def _icp_core(
    groups: Sequence[tuple[np.ndarray, np.ndarray]], T: RigidTransform2D, max_iters: int, tol: float
) -> IcpResult:
    """ICP for one transform shared by several (source, target) groups.

    Closest points are searched within each group's own target.
    """
    trees = [cKDTree(t) for _, t in groups]
    src = np.concatenate([g[0] for g in groups])

    def match(T):
        d_all, m_all = [], []
        for (s_g, t_g), tree in zip(groups, trees):
            d, nn = tree.query(T.apply(s_g))
            d_all.append(d)
            m_all.append(t_g[nn])
        d = np.concatenate(d_all)
        return float(np.sqrt(np.mean(d**2))), np.concatenate(m_all)

    rms, matched = match(T)
    result = IcpResult(T, [rms])
    for it in range(max_iters):
        cand = fit_rigid(src, matched)
        rms_c, matched_c = match(cand)
        if rms_c > rms:
            # only reachable through rounding; keep the better transform
            result.converged = True
            break
        gain = rms - rms_c
        T, matched, rms = cand, matched_c, rms_c
        result.transform = T
        result.residuals.append(rms)
        result.iterations = it + 1
        if gain < tol:
            result.converged = True
            break
    return result


# ---------------------------------------------------------------------------
# labeling


@dataclass(frozen=True)
class DomelConfig:
    canny_sigma: float = 1.4
    canny_low: float = 10.0
    canny_high: float = 30.0
    rounds: int = 3  # outer ICP rounds per stage
    max_iters: int = 30
    tol: float = 1e-4
    trim_factor: float = 2.5  # later rounds drop pairs beyond factor * median distance
    trim_floor: float = 1.5  # px; the trimming radius never shrinks below this
    boundary_gate: float = 2.0  # px; stage III uses edges and events this close to the mask boundary
    mask_target: str = "edges"  # stage III target: "edges" (frame edges on the mask contour) or "contour" (the mask contour)
    max_refine: float = 2.0  # px; a stage-III correction moving any event further is rejected
    min_refine_gain: float = 0.25  # px; stage III must cut the contour RMS by this much to be kept
    min_events: int = 20  # frames with fewer events do not contribute to the fit
    shared: bool = True  # one transform for the whole sequence instead of one per frame

    def __post_init__(self):
        if self.mask_target not in ("edges", "contour"):
            raise ValueError(f"mask_target must be 'edges' or 'contour', got {self.mask_target!r}")


@dataclass
class Alignment:
    frames: tuple[int, ...]
    edge_fit: RigidTransform2D
    mask_fit: RigidTransform2D
    edge_residuals: list[float]
    mask_residuals: list[float]

    @property
    def total(self) -> RigidTransform2D:
        return self.mask_fit.compose(self.edge_fit)


def _robust_icp(groups: list[tuple[np.ndarray, np.ndarray]], cfg: DomelConfig) -> tuple[RigidTransform2D, list[float]]:
    """Several ICP rounds, each on the source points that ended the last round near their target."""
    T = RigidTransform2D()
    residuals: list[float] = []
    trees = [cKDTree(t) for _, t in groups]
    active = [np.ones(len(s), dtype=bool) for s, _ in groups]
    for _ in range(cfg.rounds):
        sub = [(s[a], t) for (s, t), a in zip(groups, active) if a.sum()]
        if sum(len(s) for s, _ in sub) < 3:
            break
        res = _icp_core(sub, T, cfg.max_iters, cfg.tol)
        T = res.transform
        residuals.extend(res.residuals)
        dists = [tree.query(T.apply(s))[0] for (s, _), tree in zip(groups, trees)]
        radius = max(cfg.trim_factor * float(np.median(np.concatenate(dists))), cfg.trim_floor)
        active = [d <= radius for d in dists]
    return T, residuals


def _group_rms(groups, T: RigidTransform2D) -> float:
    d = np.concatenate([cKDTree(t).query(T.apply(s))[0] for s, t in groups])
    return float(np.sqrt(np.mean(d**2)))


def _contour(edges: np.ndarray, mask: np.ndarray, gate: float) -> np.ndarray:
    """Frame edge pixels lying along the object mask contour."""
    boundary = edge_points(mask_boundary(mask))
    if len(boundary) == 0 or len(edges) == 0:
        return np.zeros((0, 2))
    d, _ = cKDTree(boundary).query(edges)
    return edges[d <= gate]


def align_events(
    groups: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    config: DomelConfig | None = None,
    frame_ids: Sequence[int] | None = None,
) -> Alignment:
    """One rigid transform for (event xy, frame, mask) groups.

    Stage II aligns events to the Canny edges of their frame; stage III
    refines against the object contour, traced either by the frame edges
    near the mask boundary (default) or by the mask itself.
    """
    cfg = config or DomelConfig()
    ident = RigidTransform2D()
    frame_ids = tuple(frame_ids) if frame_ids is not None else tuple(range(len(groups)))
    xys = [np.asarray(xy, dtype=np.float64).reshape(-1, 2) for xy, _, _ in groups]
    edges = [subpixel_edges(f, cfg.canny_sigma, cfg.canny_low, cfg.canny_high) for _, f, _ in groups]
    stage2_groups = [(xy, e) for xy, e in zip(xys, edges) if len(xy) and len(e)]
    if sum(len(xy) for xy, _ in stage2_groups) >= 3:
        edge_fit, edge_res = _robust_icp(stage2_groups, cfg)
    else:
        edge_fit, edge_res = ident, []

    mask_groups = []
    for xy, e, (_, _, mask) in zip(xys, edges, groups):
        if cfg.mask_target == "edges":
            contour = _contour(e, mask, cfg.boundary_gate)
        else:
            contour = mask_contour(mask)
        if len(contour) < 3 or len(xy) == 0:
            continue
        moved = edge_fit.apply(xy)
        d, _ = cKDTree(contour).query(moved)
        near = d <= cfg.boundary_gate
        if near.any():
            mask_groups.append((moved[near], contour))
    mask_fit, mask_res = ident, []
    if sum(len(s) for s, _ in mask_groups) >= 3:
        fit, res = _robust_icp(mask_groups, cfg)
        pts = np.concatenate([edge_fit.apply(xy) for xy in xys if len(xy)])
        shift = float(np.hypot(*(fit.apply(pts) - pts).T).max())
        gain = _group_rms(mask_groups, ident) - _group_rms(mask_groups, fit)
        if shift <= cfg.max_refine and gain >= cfg.min_refine_gain:
            mask_fit, mask_res = fit, res
        else:
            log.debug("stage III correction rejected (shift %.2f px, gain %.3f px)", shift, gain)
    return Alignment(frame_ids, edge_fit, mask_fit, edge_res, mask_res)


def lookup_mask(xy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask id at the rounded position of each point; points off the image get 0."""
    h, w = mask.shape
    px = np.rint(xy[:, 0]).astype(np.int64)
    py = np.rint(xy[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    out = np.zeros(len(xy), dtype=np.int64)
    out[inside] = mask[py[inside], px[inside]]
    return out


def label_points(
    xy: np.ndarray, frame: np.ndarray, mask: np.ndarray, config: DomelConfig | None = None
) -> tuple[np.ndarray, Alignment]:
    """Object id per point after aligning the points to one frame/mask pair."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    align = align_events([(xy, frame, mask)], config)
    return lookup_mask(align.total.apply(xy), mask), align


@dataclass
class DomelResult:
    labels: np.ndarray  # 0/1 per event
    object_ids: np.ndarray  # mask id per event
    alignments: list[Alignment]


def label_events(
    t: np.ndarray,
    xy: np.ndarray,
    frames: Sequence[ApsFrame],
    masks: Sequence[ObjectMask],
    config: DomelConfig | None = None,
    threads: int = 1,
) -> DomelResult:
    """Label events at (possibly sub-pixel) positions ``xy`` from the frame/mask pair owning each timestamp.

    With ``shared=False`` the per-frame fits are independent and run on up to ``threads`` workers.
    """
    if len(frames) != len(masks):
        raise SyncError(f"{len(frames)} frames but {len(masks)} masks")
    for f, m in zip(frames, masks):
        if f.timestamp_us != m.timestamp_us:
            raise SyncError(f"frame at {f.timestamp_us} us has no mask with the same timestamp")
        if f.image.shape != m.ids.shape:
            raise SyncError(f"frame and mask at {f.timestamp_us} us differ in shape")
    cfg = config or DomelConfig()
    xy_all = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    owner = synchronize(t, [f.timestamp_us for f in frames])
    used = [int(i) for i in np.unique(owner)]
    counts = np.bincount(owner, minlength=len(frames))
    fit_frames = [i for i in used if counts[i] >= cfg.min_events]

    def group(i):
        return (xy_all[owner == i], frames[i].image, masks[i].ids)

    transform_of: dict[int, RigidTransform2D] = {}
    aligns: list[Alignment] = []
    if cfg.shared:
        if fit_frames:
            a = align_events([group(i) for i in fit_frames], cfg, fit_frames)
            aligns.append(a)
            transform_of = {i: a.total for i in used}
    else:
        def fit(i):
            return align_events([group(i)], cfg, [i])

        if threads > 1 and len(fit_frames) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                aligns = list(pool.map(fit, fit_frames))
        else:
            aligns = [fit(i) for i in fit_frames]
        transform_of = {i: a.total for i, a in zip(fit_frames, aligns)}
        for i in used:
            if i not in transform_of and aligns:
                # the misalignment belongs to the rig, so the nearest frame's estimate is reused
                donor = min(fit_frames, key=lambda j: (abs(j - i), j))
                transform_of[i] = transform_of[donor]
    ids = np.zeros(len(xy_all), dtype=np.int64)
    for i in used:
        sel = np.nonzero(owner == i)[0]
        T = transform_of.get(i, RigidTransform2D())
        ids[sel] = lookup_mask(T.apply(xy_all[sel]), masks[i].ids)
    for a in aligns:
        log.debug("frames %s: edge rms %s", a.frames[:3], a.edge_residuals[-1:] or "n/a")
    return DomelResult((ids > 0).astype(np.int64), ids, aligns)


def label_stream(
    stream: EventStream,
    frames: Sequence[ApsFrame],
    masks: Sequence[ObjectMask],
    config: DomelConfig | None = None,
    threads: int = 1,
) -> DomelResult:
    """Label every event of ``stream`` (see :func:`label_events`)."""
    return label_events(stream.t, np.column_stack([stream.x, stream.y]), frames, masks, config, threads)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _cases import domel_scene, misaligned
from evseg.domel import (
    DomelConfig,
    RigidTransform2D,
    SyncError,
    canny_edges,
    fit_rigid,
    icp_2d,
    label_events,
    label_points,
    label_stream,
    lookup_mask,
    mask_boundary,
    mask_contour,
    subpixel_edges,
    synchronize,
)
from evseg.pgm import ApsFrame, ObjectMask, PgmError, read_frame_dir, read_pgm, write_frame_dir, write_pgm


def scatter(n=120, seed=0):
    return np.random.default_rng(seed).random((n, 2)) * 40


# -- synchronization --------------------------------------------------------------


def test_sync_examples():
    frames = [0, 33_000]
    assert synchronize(np.array([10_000]), frames).tolist() == [0]
    assert synchronize(np.array([33_000, 40_000]), frames).tolist() == [1, 1]
    assert synchronize(np.array([-5]), [100, 200]).tolist() == [0]


def test_sync_errors():
    with pytest.raises(SyncError):
        synchronize(np.array([1]), [])
    with pytest.raises(SyncError):
        synchronize(np.array([1]), [5, 5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=8, unique=True), st.integers(0, 2 * 10**6))
def test_sync_interval_membership(frames, t):
    frames = sorted(frames)
    i = int(synchronize(np.array([t]), frames)[0])
    if t >= frames[0]:
        assert frames[i] <= t and (i == len(frames) - 1 or t < frames[i + 1])
    else:
        assert i == 0


# -- edges ----------------------------------------------------------------------


def test_canny_uniform_is_empty():
    assert not canny_edges(np.full((20, 20), 128, dtype=np.uint8)).any()


def test_canny_vertical_step_is_one_column():
    img = np.zeros((20, 20), dtype=np.uint8)
    img[:, 10:] = 255
    e = canny_edges(img)
    cols = np.nonzero(e.any(axis=0))[0]
    assert len(cols) == 1 and cols[0] in (9, 10)
    assert e[:, cols[0]].all()


def test_canny_weak_pixel_excluded():
    img = np.full((21, 21), 100.0)
    img[10, 10] = 110.0  # a bump whose gradient stays far below the low threshold
    assert not canny_edges(img).any()


def test_canny_rejects_swapped_thresholds():
    with pytest.raises(ValueError):
        canny_edges(np.zeros((5, 5)), low=40, high=10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-6, 6), st.integers(-6, 6))
def test_canny_translation_equivariant(seed, dx, dy):
    from scipy import ndimage

    # a textured patch on a flat canvas wide enough that no filter reaches the border
    patch = ndimage.zoom(np.random.default_rng(seed).random((6, 6)), 6, order=1) * 255

    def place(oy, ox):
        img = np.full((80, 80), 128.0)
        img[22 + oy : 58 + oy, 22 + ox : 58 + ox] = patch
        return img

    a = canny_edges(place(0, 0))
    b = canny_edges(place(dy, dx))
    assert np.array_equal(np.roll(a, (dy, dx), axis=(0, 1)), b)


def test_subpixel_edge_of_blurred_step():
    x = np.arange(30)
    row = 255 / (1 + np.exp(-(x - 14.3) / 0.8))
    img = np.tile(row, (20, 1))
    pts = subpixel_edges(img)
    inner = pts[(pts[:, 1] > 3) & (pts[:, 1] < 16)]
    assert np.all(np.abs(inner[:, 0] - 14.3) < 0.1)


def test_mask_contour_midpoints():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[1, 1] = 3
    pts = sorted(map(tuple, mask_contour(m).tolist()))
    assert pts == [(0.5, 1.0), (1.0, 0.5), (1.0, 1.5), (1.5, 1.0)]


def test_mask_boundary():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[1:5, 1:5] = 1
    b = mask_boundary(m)
    assert b.sum() == 12 and not b[2:4, 2:4].any()


# -- rigid fits and ICP -------------------------------------------------------------


def test_transform_algebra():
    a = RigidTransform2D(0.3, 1.0, -2.0)
    b = RigidTransform2D(-0.1, 0.5, 4.0)
    p = np.array([[1.0, 2.0], [-3.0, 0.5]])
    assert np.allclose(b.compose(a).apply(p), b.apply(a.apply(p)))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)


def test_fit_rigid_degenerate_source():
    T = fit_rigid(np.ones((5, 2)), np.ones((5, 2)) + [3.0, -1.0])
    assert (T.theta, T.tx, T.ty) == (0.0, 3.0, -1.0)


def test_icp_identity():
    pts = scatter()
    res = icp_2d(pts, pts)
    assert res.rms == 0.0 and res.transform.theta == 0.0
    assert abs(res.transform.tx) < 1e-12 and abs(res.transform.ty) < 1e-12


def test_icp_rotation_and_shift():
    src = scatter()
    true = RigidTransform2D(math.radians(5), 3.0, -2.0)
    res = icp_2d(src, true.apply(src))
    assert abs(math.degrees(res.transform.theta) - 5) <= 0.01
    assert res.rms <= 0.1 and res.iterations <= 30


def test_icp_translation_only():
    src = scatter()
    res = icp_2d(src, src + [4.0, 0.0])
    assert res.iterations <= 3
    assert abs(res.transform.theta) < 1e-9 and res.transform.tx == pytest.approx(4.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_icp_residual_non_increasing(seed):
    rng = np.random.default_rng(seed)
    src = rng.random((60, 2)) * 30
    tgt = rng.random((80, 2)) * 30
    res = icp_2d(src, tgt, init=str(rng.choice(["identity", "centroid"])))
    assert all(b <= a for a, b in zip(res.residuals, res.residuals[1:]))


def test_icp_degenerate_source_translates():
    res = icp_2d(np.zeros((4, 2)), np.array([[2.0, 1.0]]))
    assert res.rms == 0.0 and res.transform.theta == 0.0


def test_icp_empty_input():
    with pytest.raises(ValueError):
        icp_2d(np.zeros((0, 2)), np.zeros((3, 2)))


# -- labeling ----------------------------------------------------------------------


def square_fixture():
    """Bright square on dark ground, with events 0.75 px either side of every step edge."""
    img = np.zeros((60, 60), dtype=np.uint8)
    img[20:40, 20:40] = 255
    mask = (img > 0).astype(np.uint8)
    s = np.arange(20.0, 39.5, 0.5)  # stays clear of the .5 rounding line at the far side
    lo, hi = 19.5, 39.5
    pts, inside = [], []
    for off, ins in ((0.75, True), (-0.75, False)):
        for u in s:
            pts += [(lo + off, u), (hi - off, u), (u, lo + off), (u, hi - off)]
            inside += [ins] * 4
    return img, mask, np.array(pts), np.array(inside)


def test_square_fixture_recovers_global_shift():
    img, mask, pts, inside = square_fixture()
    c = np.array([29.5, 29.5])
    rot = RigidTransform2D(math.radians(1.0))
    t = c - rot.apply(c)[0] + [2.0, 0.0]
    moved = RigidTransform2D(rot.theta, float(t[0]), float(t[1])).apply(pts)
    ids, _ = label_points(moved, img, mask)
    assert np.mean(ids[inside] == 1) >= 0.99
    assert np.mean(ids[~inside] == 0) >= 0.99


def test_empty_mask_gives_background():
    img, _, pts, _ = square_fixture()
    ids, _ = label_points(pts, img, np.zeros_like(img))
    assert not ids.any()


def test_aligned_synth_matches_direct_lookup():
    seq = domel_scene(0)
    _, _, truth = misaligned(seq)
    res = label_stream(seq.events, seq.frames, seq.masks)
    assert np.array_equal(res.object_ids, truth)


@pytest.mark.parametrize("shared", [True, False])
def test_misaligned_synth_recovered(shared):
    seq = domel_scene(1)
    xy, _, truth = misaligned(seq, seed=1)
    res = label_events(seq.events.t, xy, seq.frames, seq.masks, DomelConfig(shared=shared))
    fg = truth > 0
    assert np.mean(res.labels[fg] == 1) >= 0.99
    assert np.mean(res.labels[~fg] == 0) >= 0.99


def test_mask_stage_corrects_offset_mask():
    # events and frame agree, but the mask is drawn 2 px to the right
    img, mask, pts, inside = square_fixture()
    off = np.roll(mask, 2, axis=1)
    cfg = DomelConfig(mask_target="contour", boundary_gate=3.0, max_refine=3.0)
    ids, al = label_points(pts, img, off, cfg)
    assert al.mask_fit.tx == pytest.approx(2.0, abs=0.1) and abs(al.mask_fit.ty) < 0.1
    assert np.mean(ids[inside] == 1) >= 0.99 and np.mean(ids[~inside] == 0) >= 0.99
    # the default target follows the frame edges, so the events stay put
    _, al = label_points(pts, img, off)
    assert abs(al.total.tx) < 0.1


def test_lookup_mask_off_image():
    mask = np.ones((4, 4), dtype=np.uint8)
    assert lookup_mask(np.array([[-1.0, 0.0], [1.4, 2.6], [3.6, 0.0]]), mask).tolist() == [0, 1, 0]


def test_label_stream_mismatched_inputs():
    seq = domel_scene(0)
    with pytest.raises(SyncError):
        label_stream(seq.events, seq.frames, seq.masks[:-1])
    bad = [ObjectMask(m.timestamp_us + 1, m.ids) for m in seq.masks]
    with pytest.raises(SyncError):
        label_stream(seq.events, seq.frames, bad)


# -- PGM files ----------------------------------------------------------------------


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_comment_header(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]


@pytest.mark.parametrize(
    "raw", [b"P2\n2 1\n255\n1 2", b"P5\n2 1\n65535\n\x00\x01\x00\x02", b"P5\n2 2\n255\n\x01"]
)
def test_pgm_rejects_bad_files(tmp_path, raw):
    (tmp_path / "b.pgm").write_bytes(raw)
    with pytest.raises(PgmError):
        read_pgm(tmp_path / "b.pgm")


def test_frame_dir_sorted_by_timestamp(tmp_path):
    frames = [ApsFrame(t, np.full((2, 2), i, dtype=np.uint8)) for i, t in enumerate([0, 500, 10_000])]
    write_frame_dir(tmp_path, frames)
    back = read_frame_dir(tmp_path)
    assert [f.timestamp_us for f in back] == [0, 500, 10_000]
    assert [int(f.image[0, 0]) for f in back] == [0, 1, 2]

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evseg.events import (
    Event,
    EventBoundsError,
    EventFormatError,
    EventOrderError,
    EventStream,
    SensorGeometry,
    format_events,
    format_labels,
    parse_events,
    parse_labels,
    read_events,
    slice_windows,
    write_events,
)

G10 = SensorGeometry(10, 10)


def test_parse_maps_fields():
    ev = parse_events("100,3,4,1", G10)
    assert list(ev) == [Event(t=100, x=3, y=4, p=1)]


def test_parse_zero_polarity_is_negative():
    assert parse_events("100,3,4,0", G10)[0].p == -1


def test_parse_out_of_bounds():
    with pytest.raises(EventBoundsError):
        parse_events("100,12,4,1", G10)


def test_parse_skips_comments_and_header():
    text = "# recorded\nt,x,y,p\n5 1 1 1\n6,2,2,-1\n"
    ev = parse_events(text, G10)
    assert len(ev) == 2 and ev[1] == Event(6, 2, 2, -1)


def test_parse_reports_line_number():
    with pytest.raises(EventFormatError, match="line 3"):
        parse_events("1,1,1,1\n2,2,2,1\n3,3,x,1\n", G10)


def test_bad_polarity():
    with pytest.raises(EventFormatError):
        parse_events("1,1,1,2", G10)


def test_file_roundtrip_with_geometry_comment(tmp_path):
    ev = EventStream.from_events([Event(1, 2, 3, 1), Event(4, 5, 6, -1)])
    path = tmp_path / "ev.txt"
    write_events(path, ev, SensorGeometry(7, 8))
    back, geom = read_events(path)
    assert geom == SensorGeometry(7, 8)
    assert list(back) == list(ev)


def test_read_without_geometry_needs_explicit_size(tmp_path):
    path = tmp_path / "ev.txt"
    path.write_text("1,1,1,1\n")
    with pytest.raises(EventFormatError):
        read_events(path)
    ev, _ = read_events(path, G10)
    assert len(ev) == 1


events_strategy = st.lists(
    st.tuples(
        st.integers(0, 10**9), st.integers(0, 9), st.integers(0, 9), st.sampled_from([-1, 1])
    ),
    max_size=50,
)


@settings(deadline=None)
@given(events_strategy)
def test_text_roundtrip(rows):
    ev = EventStream.from_events([Event(*r) for r in rows])
    back = parse_events(format_events(ev), G10)
    assert list(back) == list(ev)


def test_label_roundtrip_with_ids():
    labels = np.array([0, 1, 1])
    ids = np.array([0, 2, 3])
    lab, oid = parse_labels(format_labels(labels, ids))
    assert lab.tolist() == [0, 1, 1] and oid.tolist() == [0, 2, 3]
    lab, oid = parse_labels("1\n0\n")
    assert lab.tolist() == [1, 0] and oid.tolist() == [0, 0]


def test_label_rejects_bad_values():
    with pytest.raises(EventFormatError):
        parse_labels("2\n")


# -- windowing ----------------------------------------------------------------


def _stream(ts):
    ts = np.asarray(ts, dtype=np.int64)
    z = np.zeros_like(ts)
    return EventStream(ts, z, z, z + 1)


def test_window_cap_keeps_latest():
    # 7000 events evenly over 10 ms
    ts = np.arange(7000) * 10_000 // 7000
    wins = slice_windows(_stream(ts), 10_000, 5000)
    assert len(wins) == 1
    w = wins[0]
    assert len(w) == 5000
    assert w.source_index.tolist() == list(range(2000, 7000))
    assert len(w.dropped_index) == 2000


def test_empty_stream_has_no_windows():
    assert slice_windows(EventStream.empty(), 10_000, 5000) == []


def test_window_bucketing_matches_floor_division():
    ts = [1000, 2000, 3000]
    wins = slice_windows(_stream(ts), 2000, 5000)
    got = [w.events.t.tolist() for w in wins]
    # oracle: bucket each event by floor(t / duration)
    buckets: dict[int, list[int]] = {}
    for t in ts:
        buckets.setdefault(t // 2000, []).append(t)
    assert got == [buckets[k] for k in sorted(buckets)]
    assert got == [[1000], [2000, 3000]]


def test_interior_empty_window_is_kept():
    wins = slice_windows(_stream([0, 25_000]), 10_000, 10)
    assert [len(w) for w in wins] == [1, 0, 1]


def test_unsorted_stream_rejected():
    with pytest.raises(EventOrderError):
        slice_windows(_stream([5, 1]), 10, 10)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 50_000), max_size=300),
    st.integers(1, 20_000),
    st.integers(1, 40),
)
def test_windows_partition_surviving_events(ts, duration, n_max):
    ts = sorted(ts)
    stream = _stream(ts)
    wins = slice_windows(stream, duration, n_max)
    kept = np.concatenate([w.source_index for w in wins]) if wins else np.zeros(0, int)
    dropped = np.concatenate([w.dropped_index for w in wins]) if wins else np.zeros(0, int)
    # no event in two windows, kept + dropped covers everything
    assert len(set(kept.tolist())) == len(kept)
    assert sorted(kept.tolist() + dropped.tolist()) == list(range(len(ts)))
    for w in wins:
        assert len(w) <= n_max
        assert np.all((w.events.t >= w.t_start) & (w.events.t < w.t_end))
        if len(w.dropped_index):
            # dropped events are never later than kept ones
            assert stream.t[w.dropped_index].max() <= w.events.t.min()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evseg.events import EventStream, SensorGeometry, slice_windows
from evseg.graph import (
    DEFAULT_K,
    InsufficientNodesError,
    MetricConfig,
    build_knn_graph,
    farthest_point_sampling,
    format_edge_list,
    graph_from_positions,
    knn_self,
    spatiotemporal_distance,
)


def brute_knn(pos, k):
    """O(N^2) oracle: sort every row by (distance, index), skip self."""
    n = len(pos)
    out = []
    for i in range(n):
        cand = [(float(np.sum((pos[j] - pos[i]) ** 2)), j) for j in range(n) if j != i]
        cand.sort()
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def brute_fps(pos, m):
    """Plain-loop greedy max-min oracle with the same seeding and tie rules."""
    n = len(pos)
    seed = min(range(n), key=lambda i: (pos[i][2], i))
    chosen = [seed]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(math.dist(pos[i], pos[c]) ** 2 for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_distance_examples():
    assert spatiotemporal_distance((1, 2, 3), (1, 2, 3)) == 0
    assert spatiotemporal_distance((0, 0, 0), (3, 4, 0)) == 5
    assert spatiotemporal_distance((0, 0, 0), (1, 1, 1)) == pytest.approx(math.sqrt(3), abs=1e-15)


def test_default_k():
    assert DEFAULT_K == 16


def test_unit_square_neighbors():
    pos = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    nb = knn_self(pos, 2)
    assert nb.tolist() == brute_knn(pos, 2).tolist()
    for i, row in enumerate(nb):
        assert all(math.dist(pos[i], pos[j]) == 1.0 for j in row)


def test_collinear_nearest():
    pos = np.array([[0, 0, 0], [1, 0, 0], [5, 0, 0]], dtype=float)
    assert knn_self(pos, 1)[:, 0].tolist() == [1, 0, 1]


def test_too_few_nodes():
    with pytest.raises(InsufficientNodesError):
        knn_self(np.zeros((3, 3)), 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 64), st.integers(1, 16), st.integers(0, 2**31 - 1), st.booleans())
def test_knn_matches_bruteforce(n, k, seed, lattice):
    k = min(k, n - 1)
    rng = np.random.default_rng(seed)
    if lattice:
        # integer lattice points produce many exact distance ties
        pos = rng.integers(0, 4, (n, 3)).astype(float)
    else:
        pos = rng.random((n, 3)) * 10
    assert knn_self(pos, k).tolist() == brute_knn(pos, k).tolist()


def test_knn_deterministic():
    pos = np.random.default_rng(1).random((200, 3))
    assert np.array_equal(knn_self(pos, 16), knn_self(pos, 16))


def test_build_graph_from_window_uses_auto_time_scale():
    t = np.array([0, 2500, 5000, 7500, 9999], dtype=np.int64)
    x = np.array([0, 1, 2, 3, 4], dtype=np.int64)
    stream = EventStream(t, x, x.copy(), np.ones(5, dtype=np.int64))
    win = slice_windows(stream, 10_000, 5000)[0]
    geo = SensorGeometry(40, 20)
    g = build_knn_graph(win, k=2, geometry=geo)
    assert g.positions[:, 2].tolist() == pytest.approx([0, 10, 20, 30, 39.996])
    assert MetricConfig.auto(geo, 10_000).time_scale == pytest.approx(40 / 10_000)
    assert g.neighbors.shape == (5, 2)
    assert np.array_equal(g.features, g.positions)


def test_edge_list_dump():
    g = graph_from_positions(np.array([[0, 0, 0], [3, 4, 0], [0, 0, 1]], dtype=float), k=1)
    assert format_edge_list(g).splitlines() == ["0 2 1.000000", "1 0 5.000000", "2 0 1.000000"]


# -- farthest point sampling --------------------------------------------------


def test_fps_full_permutation():
    pos = np.random.default_rng(0).random((20, 3))
    assert sorted(farthest_point_sampling(pos, 20).tolist()) == list(range(20))


def test_fps_line_example():
    pos = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], dtype=float)
    assert set(farthest_point_sampling(pos, 2).tolist()) == {0, 2}


def test_fps_single_is_earliest():
    pos = np.array([[0, 0, 5], [1, 0, 2], [2, 0, 9]], dtype=float)
    assert farthest_point_sampling(pos, 1).tolist() == [1]


def test_fps_with_duplicate_points_has_no_repeats():
    pos = np.zeros((6, 3))
    out = farthest_point_sampling(pos, 6)
    assert sorted(out.tolist()) == list(range(6))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1), st.booleans())
def test_fps_matches_oracle(n, seed, lattice):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 3, (n, 3)).astype(float) if lattice else rng.random((n, 3))
    m = int(rng.integers(1, n + 1))
    got = farthest_point_sampling(pos, m).tolist()
    assert got == brute_fps(pos, m)
    assert len(set(got)) == m
    if m >= 2:
        spread = min(math.dist(pos[a], pos[b]) for i, a in enumerate(got) for b in got[i + 1 :])
        oracle = brute_fps(pos, m)
        ref = min(math.dist(pos[a], pos[b]) for i, a in enumerate(oracle) for b in oracle[i + 1 :])
        assert spread >= ref

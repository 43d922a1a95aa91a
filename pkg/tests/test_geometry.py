import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from blmc.geometry import (LocationSet, build_neighbor_graph, build_prediction_neighbors,
                           order_locations)

coords_strategy = st.integers(2, 40).flatmap(
    lambda n: arrays(float, (n, 2), elements=st.floats(0, 1, allow_nan=False)))


def test_single_point_identity():
    assert order_locations([[0.3, 0.7]]).tolist() == [0]


def test_sorted_input_is_fixed_point():
    pts = np.array([[0.0, 0.1], [0.2, 0.1], [0.5, 0.5], [1.0, 0.9]])
    assert order_locations(pts).tolist() == [0, 1, 2, 3]


def test_four_points_match_explicit_sort(rng):
    pts = rng.random((4, 2))
    expected = sorted(range(4), key=lambda i: (pts[i, 0] + pts[i, 1], i))
    assert order_locations(pts).tolist() == expected


def test_ties_broken_by_index():
    pts = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.0, 0.0]])
    assert order_locations(pts).tolist() == [3, 0, 1, 2]


@pytest.mark.parametrize("bad", [np.empty((0, 2)), [[0.0, np.nan]]])
def test_order_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        order_locations(bad)


def test_order_rejects_mixed_dimensions():
    with pytest.raises(ValueError):
        order_locations([[0.0, 1.0], [1.0]])


@given(coords_strategy)
@settings(max_examples=40, deadline=None)
def test_ordering_is_stable_permutation(pts):
    perm = order_locations(pts)
    assert sorted(perm.tolist()) == list(range(len(pts)))
    assert np.array_equal(order_locations(pts), perm)
    keys = pts[perm].sum(axis=1)
    assert np.all(np.diff(keys) >= 0)


def test_saturated_neighborhoods(rng):
    locs = LocationSet.from_coords(rng.random((7, 2)))
    g = build_neighbor_graph(locs, 10)
    for i in range(7):
        assert g.neighbors(i) == list(range(i))


def test_line_points_two_nearest_predecessors():
    locs = LocationSet.from_coords(np.c_[np.arange(5.0), np.zeros(5)])
    g = build_neighbor_graph(locs, 2)
    assert g.neighbors(0) == []
    assert g.neighbors(1) == [0]
    for i in range(2, 5):
        assert g.neighbors(i) == [i - 2, i - 1]


def test_m_zero_rejected(rng):
    with pytest.raises(ValueError):
        build_neighbor_graph(LocationSet.from_coords(rng.random((3, 2))), 0)


def test_duplicates_flagged_not_fatal():
    locs = LocationSet.from_coords([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    g = build_neighbor_graph(locs, 2)
    assert g.duplicates


def _check_nearest(pts, g, m):
    for i in range(len(pts)):
        nb = g.neighbors(i)
        assert len(nb) == min(m, i)
        assert nb == sorted(set(nb)) and all(j < i for j in nb)
        if not nb:
            continue
        d = np.linalg.norm(pts[:i] - pts[i], axis=1)
        worst = d[nb].max()
        others = np.setdiff1d(np.arange(i), nb)
        assert np.all(d[others] >= worst - 1e-15)


@given(coords_strategy, st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_neighbors_are_nearest_predecessors(pts, m):
    locs = LocationSet.from_coords(pts)
    g = build_neighbor_graph(locs, m)
    _check_nearest(locs.ordered, g, m)
    assert g.nnz <= len(pts) * m


def test_tree_path_matches_brute_force(rng, monkeypatch):
    import blmc.geometry as geo
    pts = rng.random((600, 2))
    pts[100] = pts[50]          # a duplicate to exercise ties
    locs = LocationSet.from_coords(pts)
    brute = build_neighbor_graph(locs, 8)
    monkeypatch.setattr(geo, "_BRUTE_FORCE_MAX", 10)
    tree = build_neighbor_graph(locs, 8)
    assert np.array_equal(brute.index, tree.index)


def test_grid_ties_on_lattice(monkeypatch):
    import blmc.geometry as geo
    g1 = np.arange(25.0)
    pts = np.array([(a, b) for a in g1 for b in g1])
    locs = LocationSet.from_coords(pts)
    brute = build_neighbor_graph(locs, 6)
    monkeypatch.setattr(geo, "_BRUTE_FORCE_MAX", 10)
    assert np.array_equal(brute.index, build_neighbor_graph(locs, 6).index)


def test_prediction_coincident_point_first(rng):
    ref = LocationSet.from_coords(rng.random((10, 2)))
    j = 4
    pn = build_prediction_neighbors(ref, ref.ordered[j:j + 1], 3)
    assert pn.index[0, 0] == j


def test_prediction_m_capped_at_n(rng):
    ref = LocationSet.from_coords(rng.random((3, 2)))
    pn = build_prediction_neighbors(ref, rng.random((2, 2)), 5)
    assert pn.index.shape == (2, 3)
    assert all(sorted(r) == [0, 1, 2] for r in pn.index.tolist())


def test_prediction_matches_exhaustive_sort(rng):
    ref = LocationSet.from_coords(rng.random((10, 2)))
    u = rng.random(2)
    d = np.linalg.norm(ref.ordered - u, axis=1)
    expected = sorted(range(10), key=lambda i: (d[i], i))[:4]
    assert build_prediction_neighbors(ref, [u], 4).index[0].tolist() == expected


def test_prediction_tree_path(rng, monkeypatch):
    ref = LocationSet.from_coords(rng.random((3000, 2)))
    new = rng.random((1500, 2))
    fast = build_prediction_neighbors(ref, new, 7)
    d = np.linalg.norm(ref.ordered[None] - new[:20, None], axis=2)
    for r in range(20):
        assert fast.index[r].tolist() == np.lexsort((np.arange(3000), d[r]))[:7].tolist()


def test_prediction_dimension_mismatch(rng):
    ref = LocationSet.from_coords(rng.random((5, 2)))
    with pytest.raises(ValueError):
        build_prediction_neighbors(ref, [[0.0, 0.0, 0.0]], 2)

"""Location ordering and nearest-neighbor sets.

All index sets returned here are 0-based *model* indices, i.e. positions in
the ordered location list. ``LocationSet.order[i]`` is the storage index of
the location at model position ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# Above this many points the neighbor search switches to a KD-tree; the
# output is identical to the exhaustive scan.
_BRUTE_FORCE_MAX = 4000


def _as_coords(coords) -> np.ndarray:
    try:
        arr = np.asarray(coords, dtype=float)
    except ValueError as exc:  # ragged input
        raise ValueError("coordinates have mixed dimensions") from exc
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("coordinates must be a 2-D array (points x dimensions)")
    if arr.shape[0] == 0:
        raise ValueError("empty coordinate set")
    if arr.shape[1] == 0:
        raise ValueError("coordinates must have at least one dimension")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coordinates contain NaN or infinite values")
    return arr


def order_locations(coords) -> np.ndarray:
    """Permutation sorting locations by coordinate sum, ties by original index."""
    arr = _as_coords(coords)
    key = arr.sum(axis=1)
    # lexsort is stable on the last key; index as secondary key makes ties explicit
    return np.lexsort((np.arange(arr.shape[0]), key))


@dataclass(frozen=True)
class LocationSet:
    coords: np.ndarray
    order: np.ndarray

    @classmethod
    def from_coords(cls, coords) -> "LocationSet":
        arr = _as_coords(coords)
        return cls(coords=arr, order=order_locations(arr))

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def ordered(self) -> np.ndarray:
        """Coordinates in model order."""
        return self.coords[self.order]

    def has_duplicates(self) -> bool:
        return np.unique(self.coords, axis=0).shape[0] < self.n


@dataclass(frozen=True)
class NeighborGraph:
    """Neighbor lists over model indices.

    ``index[i, :count[i]]`` are the neighbors of model location ``i``, sorted
    ascending; unused slots hold -1.
    """

    index: np.ndarray
    count: np.ndarray
    m: int
    duplicates: bool = False

    @property
    def n(self) -> int:
        return self.index.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return self.index[i, : self.count[i]].tolist()

    @property
    def nnz(self) -> int:
        return int(self.count.sum())


@dataclass(frozen=True)
class PredictionNeighborhoods:
    """For each new location, the ``k`` nearest reference model indices,
    ordered nearest first (ties by smaller index)."""

    index: np.ndarray
    m: int = field(default=0)

    @property
    def k(self) -> int:
        return self.index.shape[1]


def _rank_candidates(point, cand_idx, coords, k):
    d = np.sqrt(((coords[cand_idx] - point) ** 2).sum(axis=1))
    sel = np.lexsort((cand_idx, d))[:k]
    return cand_idx[sel], d[sel]


def _nearest_exact(tree: cKDTree, coords: np.ndarray, point: np.ndarray, k: int,
                   limit: int) -> np.ndarray:
    """k nearest among coords[:limit] (ties by index), using tree over coords[:limit]."""
    kk = min(limit, max(2 * k, k + 4))
    while True:
        _, cand = tree.query(point, k=kk)
        cand = np.atleast_1d(cand)
        cand = cand[cand < limit]
        if cand.size >= k or kk >= limit:
            break
        kk = min(limit, 2 * kk)
    best, dist = _rank_candidates(point, cand, coords, k)
    # the tree may cut a tie at the boundary; widen to every point within the k-th distance
    radius = dist[-1]
    ball = np.asarray(tree.query_ball_point(point, r=radius * (1 + 1e-12) + 1e-300), dtype=int)
    ball = ball[ball < limit]
    best, _ = _rank_candidates(point, np.union1d(ball, best), coords, k)
    return best


def build_neighbor_graph(locs: LocationSet, m: int) -> NeighborGraph:
    """Nearest ``min(m, i)`` predecessors of each model location (0-based)."""
    if m < 1:
        raise ValueError("neighbor count m must be at least 1")
    pts = locs.ordered
    n = pts.shape[0]
    index = np.full((n, m), -1, dtype=np.int64)
    count = np.minimum(np.arange(n), m).astype(np.int64)
    if n <= _BRUTE_FORCE_MAX:
        for i in range(1, n):
            k = count[i]
            if k == i:
                nb = np.arange(i)
            else:
                nb, _ = _rank_candidates(pts[i], np.arange(i), pts, k)
            index[i, :k] = np.sort(nb)
    else:
        # incremental trees are expensive; rebuild on a doubling schedule
        for i in range(1, min(n, 2 * m + 1)):
            k = count[i]
            nb = np.arange(i) if k == i else _rank_candidates(pts[i], np.arange(i), pts, k)[0]
            index[i, :k] = np.sort(nb)
        start = min(n, 2 * m + 1)
        size = start
        tree = None
        for i in range(start, n):
            if tree is None or i > size:
                size = min(n, 2 * i)
                tree = cKDTree(pts[:size])
            nb = _nearest_exact(tree, pts, pts[i], count[i], limit=i)
            index[i, : count[i]] = np.sort(nb)
    return NeighborGraph(index=index, count=count, m=m, duplicates=locs.has_duplicates())


def build_prediction_neighbors(ref: LocationSet, new_locs, m: int) -> PredictionNeighborhoods:
    """The ``min(m, n)`` nearest reference locations (model indices) of each new point."""
    if ref.n == 0:
        raise ValueError("empty reference set")
    if m < 1:
        raise ValueError("neighbor count m must be at least 1")
    new = _as_coords(new_locs)
    if new.shape[1] != ref.dim:
        raise ValueError(
            f"new locations have dimension {new.shape[1]}, reference has {ref.dim}")
    pts = ref.ordered
    n = pts.shape[0]
    k = min(m, n)
    out = np.empty((new.shape[0], k), dtype=np.int64)
    if n * new.shape[0] <= 4_000_000:
        all_idx = np.arange(n)
        for r, u in enumerate(new):
            out[r] = _rank_candidates(u, all_idx, pts, k)[0]
    else:
        tree = cKDTree(pts)
        for r, u in enumerate(new):
            out[r] = _nearest_exact(tree, pts, u, k, limit=n)
    return PredictionNeighborhoods(index=out, m=m)

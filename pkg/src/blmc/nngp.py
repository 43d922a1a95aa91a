"""Sparse NNGP factorization of a unit-variance correlation precision.

The precision of one factor is ``(I - A)^T D^{-1} (I - A)`` with ``A``
strictly lower triangular (in model order) and at most ``m`` nonzeros per
row. Everything here works on vectors in model order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .geometry import LocationSet, NeighborGraph, PredictionNeighborhoods, build_prediction_neighbors
from .kernels import Kernel, correlation_matrix

logger = logging.getLogger(__name__)

JITTER = 1e-10
_LOG_2PI = math.log(2.0 * math.pi)


class NNGPBuildError(RuntimeError):
    pass


def _pairwise_batched(pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    # (r, k, d) x (r, l, d) -> (r, k, l)
    diff = pts_a[:, :, None, :] - pts_b[:, None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def _kriging_rows(targets: np.ndarray, ref: np.ndarray, nbr: np.ndarray, count: np.ndarray,
                  kernel: Kernel, what: str):
    """Kriging weights and conditional variances of each target on its neighbors.

    ``nbr`` is (r, k) with -1 padding beyond ``count``. Returns (weights, cond_var)
    with zero weights on padding slots.
    """
    r, k = nbr.shape
    weights = np.zeros((r, k))
    var = np.ones(r)
    if k == 0 or r == 0:
        return weights, var
    valid = np.arange(k)[None, :] < count[:, None]
    safe = np.where(valid, nbr, 0)
    npts = ref[safe]
    c_nn = np.exp(-kernel.decay * _pairwise_batched(npts, npts))
    c_tn = np.exp(-kernel.decay * np.sqrt(((npts - targets[:, None, :]) ** 2).sum(axis=-1)))
    pair_valid = valid[:, :, None] & valid[:, None, :]
    eye = np.broadcast_to(np.eye(k), c_nn.shape)
    c_nn = np.where(pair_valid, c_nn, eye)
    c_tn = np.where(valid, c_tn, 0.0)
    try:
        np.linalg.cholesky(c_nn)
    except np.linalg.LinAlgError:
        c_nn = c_nn.copy()
        for i in range(r):
            try:
                np.linalg.cholesky(c_nn[i])
            except np.linalg.LinAlgError:
                c_nn[i] += JITTER * np.diag(valid[i].astype(float))
                try:
                    np.linalg.cholesky(c_nn[i])
                except np.linalg.LinAlgError:
                    raise NNGPBuildError(
                        f"{what} {i}: neighbor correlation matrix is singular even after "
                        f"jitter {JITTER:g} (duplicate locations?)") from None
                logger.warning("%s %d: added jitter %g to neighbor correlation", what, i, JITTER)
    weights = np.linalg.solve(c_nn, c_tn[:, :, None])[:, :, 0]
    weights = np.where(valid, weights, 0.0)
    var = 1.0 - (weights * c_tn).sum(axis=1)
    return weights, var


@dataclass(frozen=True, eq=False)
class NNGPFactor:
    """NNGP factor of one spatial process: kriging weights on neighbors and conditional variances."""

    index: np.ndarray     # (n, m) neighbor model indices, padding replaced by 0
    weights: np.ndarray   # (n, m) rows of A; zero in padding slots
    D: np.ndarray         # (n,) conditional variances
    decay: float
    count: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @cached_property
    def _inv_sqrt_d(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.D)

    @cached_property
    def A(self) -> sp.csr_matrix:
        n, m = self.index.shape
        mask = np.arange(m)[None, :] < self.count[:, None]
        rows = np.repeat(np.arange(n), m).reshape(n, m)[mask]
        return sp.csr_matrix((self.weights[mask], (rows, self.index[mask])), shape=(n, n))

    @property
    def nnz(self) -> int:
        return int(self.count.sum())

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"vector length {v.shape[0]} does not match factor size {self.n}")
        return v

    def residual(self, v) -> np.ndarray:
        """(I - A) v for v of shape (n,) or (n, r)."""
        v = self._check(v)
        if v.ndim == 1:
            return v - (self.weights * v[self.index]).sum(axis=1)
        return v - np.einsum("ij,ijr->ir", self.weights, v[self.index])

    def whiten(self, v) -> np.ndarray:
        """D^{-1/2} (I - A) v."""
        out = self.residual(v)
        return out * (self._inv_sqrt_d if out.ndim == 1 else self._inv_sqrt_d[:, None])

    def whiten_transpose(self, w) -> np.ndarray:
        """(I - A)^T D^{-1/2} w."""
        w = self._check(w)
        z = w * (self._inv_sqrt_d if w.ndim == 1 else self._inv_sqrt_d[:, None])
        return z - self.A.T @ z

    def whitener_matrix(self) -> sp.csr_matrix:
        n = self.n
        return sp.diags(self._inv_sqrt_d) @ (sp.identity(n, format="csr") - self.A)

    def log_density(self, f) -> float:
        f = self._check(f)
        if f.ndim != 1:
            raise ValueError("log_density expects a single vector")
        z = self.whiten(f)
        return -0.5 * (self.n * _LOG_2PI + np.log(self.D).sum() + z @ z)

    def unwhiten(self, z) -> np.ndarray:
        """Solve D^{-1/2} (I - A) f = z; maps iid normals to draws from the factor."""
        z = self._check(z)
        rhs = z * (np.sqrt(self.D) if z.ndim == 1 else np.sqrt(self.D)[:, None])
        lower = (sp.identity(self.n, format="csr") - self.A).tocsr()
        return spsolve_triangular(lower, rhs, lower=True)

    def precision(self) -> np.ndarray:
        """Dense (I - A)^T D^{-1} (I - A); small n only."""
        v = self.whitener_matrix().toarray()
        return v.T @ v

    def covariance(self) -> np.ndarray:
        """Dense NNGP covariance (I - A)^{-1} D (I - A)^{-T}; small n only."""
        lower = np.eye(self.n) - self.A.toarray()
        inv = np.linalg.solve(lower, np.eye(self.n))
        return (inv * self.D) @ inv.T


def build_factor(graph: NeighborGraph, locs: LocationSet, kernel: Kernel) -> NNGPFactor:
    pts = locs.ordered
    if graph.n != pts.shape[0]:
        raise ValueError(f"graph has {graph.n} locations, location set has {pts.shape[0]}")
    weights, D = _kriging_rows(pts, pts, graph.index, graph.count, kernel, "row")
    if np.any(D <= 0):
        bad = int(np.argmin(D))
        if D[bad] < -1e-8:
            raise NNGPBuildError(f"row {bad}: negative conditional variance {D[bad]:.3g}")
        # coincident points give zero conditional variance; keep the factor invertible
        D = np.maximum(D, JITTER)
    index = np.where(graph.index >= 0, graph.index, 0)
    return NNGPFactor(index=index, weights=weights, D=D, decay=kernel.decay, count=graph.count)


@dataclass(frozen=True, eq=False)
class PredictionWeights:
    index: np.ndarray    # (n', k) reference model indices
    weights: np.ndarray  # (n', k)
    D: np.ndarray        # (n',) conditional variances, clamped at 0
    n_ref: int

    def mean(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.ndim == 1:
            return (self.weights * f[self.index]).sum(axis=1)
        return np.einsum("ij,ijr->ir", self.weights, f[self.index])

    def matrix(self) -> sp.csr_matrix:
        r, k = self.index.shape
        rows = np.repeat(np.arange(r), k)
        return sp.csr_matrix((self.weights.ravel(), (rows, self.index.ravel())),
                             shape=(r, self.n_ref))


def build_prediction_weights(ref: LocationSet, new_locs, kernel: Kernel, m: int,
                             neighborhoods: PredictionNeighborhoods | None = None
                             ) -> PredictionWeights:
    if neighborhoods is None:
        neighborhoods = build_prediction_neighbors(ref, new_locs, m)
    new = np.atleast_2d(np.asarray(new_locs, dtype=float))
    idx = neighborhoods.index
    count = np.full(idx.shape[0], idx.shape[1])
    weights, D = _kriging_rows(new, ref.ordered, idx, count, kernel, "prediction row")
    if np.any(D < -1e-8):
        bad = int(np.argmin(D))
        raise NNGPBuildError(f"prediction row {bad}: negative conditional variance {D[bad]:.3g}")
    return PredictionWeights(index=idx, weights=weights, D=np.maximum(D, 0.0), n_ref=ref.n)


def dense_correlation(locs: LocationSet, kernel: Kernel) -> np.ndarray:
    """Full correlation matrix in model order (oracle / small-n use)."""
    return correlation_matrix(kernel, locs.ordered)

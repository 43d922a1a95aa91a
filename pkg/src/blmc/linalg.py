"""Dense/sparse numerical kernels and random-matrix samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, aslinearoperator, lsmr

LSMR_ATOL = 1e-8
LSMR_BTOL = 1e-8


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; every stochastic routine takes one explicitly."""
    return np.random.Generator(np.random.Philox(int(seed)))


def cholesky(m: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower Cholesky factor. Raises on asymmetric or non-SPD input; never jitters."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > sym_tol * scale:
        raise NotPositiveDefiniteError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None


def spd_inverse(m: np.ndarray) -> np.ndarray:
    c = sla.cho_factor(m, lower=True)
    return sla.cho_solve(c, np.eye(m.shape[0]))


def is_spd(m: np.ndarray) -> bool:
    try:
        cholesky(m, sym_tol=1e-8)
    except (NotPositiveDefiniteError, ValueError):
        return False
    return True


@dataclass
class LsmrResult:
    x: np.ndarray
    iterations: int
    converged: bool
    reason: str
    residual_norm: float
    normal_residual_norm: float


_LSMR_REASONS = {
    0: "x = 0 is the exact solution",
    1: "consistent system solved to atol/btol",
    2: "least-squares solution found to atol",
    3: "condition number limit reached",
    4: "consistent system solved to machine precision",
    5: "least-squares solution found to machine precision",
    6: "condition number limit reached (machine precision)",
    7: "iteration limit reached",
}


def lsmr_solve(op, rhs, atol: float = LSMR_ATOL, btol: float = LSMR_BTOL,
               max_iter: int | None = None) -> LsmrResult:
    """Least-squares solve of ``op @ x ~= rhs`` by LSMR.

    ``op`` may be a dense array, a scipy sparse matrix or a LinearOperator.
    The default iteration cap is four times the number of unknowns.
    """
    linop = op if isinstance(op, LinearOperator) else aslinearoperator(op)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (linop.shape[0],):
        raise ValueError(f"rhs has shape {rhs.shape}, operator has {linop.shape[0]} rows")
    if max_iter is None:
        max_iter = 4 * linop.shape[1]
    x, istop, itn, normr, normar, *_ = lsmr(linop, rhs, atol=atol, btol=btol, maxiter=max_iter)
    return LsmrResult(x=x, iterations=int(itn), converged=istop not in (3, 6, 7),
                      reason=_LSMR_REASONS.get(istop, str(istop)),
                      residual_norm=float(normr), normal_residual_norm=float(normar))


def observed_noise_whiteners(sigma: np.ndarray, observed: np.ndarray):
    """Group locations by observation pattern.

    Returns a list of (location indices, observed response indices, W) where
    W is the inverse lower Cholesky factor of the observed block of ``sigma``,
    so ``W @ e_os`` has identity covariance.
    """
    patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    out = []
    for g, pat in enumerate(patterns):
        obs = np.flatnonzero(pat)
        if obs.size == 0:
            raise ValueError("a location has no observed responses")
        locs = np.flatnonzero(inverse == g)
        chol = cholesky(sigma[np.ix_(obs, obs)])
        w = sla.solve_triangular(chol, np.eye(obs.size), lower=True)
        out.append((locs, obs, w))
    return out


def woodbury_apply(covs, lam: np.ndarray, sigma: np.ndarray, observed: np.ndarray,
                   u: np.ndarray) -> np.ndarray:
    """(X~^T X~)^{-1} u through the Woodbury identity.

    ``covs`` are the K dense n x n factor covariances, ``lam`` is K x q,
    ``observed`` an n x q boolean mask, and ``u`` has length K n
    (factor-major, i.e. vec of the n x K factor matrix).
    """
    covs = [np.asarray(c, dtype=float) for c in covs]
    K = len(covs)
    n = covs[0].shape[0]
    lam = np.asarray(lam, dtype=float)
    if lam.shape[0] != K:
        raise ValueError(f"loading matrix has {lam.shape[0]} rows, expected {K}")
    u = np.asarray(u, dtype=float)
    if u.shape != (K * n,):
        raise ValueError(f"u must have length {K * n}")
    locs, resp = np.nonzero(observed)  # row-major: location, then response
    n_obs = locs.size
    # U = (Lambda kron I_n) P^T : Kn x n_obs
    U = np.zeros((K * n, n_obs))
    for k in range(K):
        U[k * n + locs, np.arange(n_obs)] = lam[k, resp]
    block_cov = sla.block_diag(*covs)
    d_sigma = np.zeros((n_obs, n_obs))
    same = locs[:, None] == locs[None, :]
    d_sigma[same] = sigma[resp[:, None], resp[None, :]][same]
    BU = block_cov @ U
    G = d_sigma + U.T @ BU
    try:
        gc = sla.cho_factor(G, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("Woodbury capacitance matrix G is singular") from None
    Bu = block_cov @ u
    return Bu - BU @ sla.cho_solve(gc, U.T @ Bu)


# --- random draws ---------------------------------------------------------

def sample_standard_normal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((rows, cols))


def sample_matrix_normal(mean: np.ndarray, l_row: np.ndarray, l_col: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """M + L_U Z L_V^T with Z iid N(0, 1); vec of the result ~ N(vec M, V kron U)."""
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal(mean.shape)
    return mean + l_row @ z @ l_col.T


def sample_wishart_bartlett(l_scale: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Wishart(S, df) draw where S = l_scale l_scale^T (Bartlett decomposition)."""
    q = l_scale.shape[0]
    if df <= q - 1:
        raise ValueError(f"Wishart degrees of freedom {df} must exceed dimension - 1 = {q - 1}")
    a = np.zeros((q, q))
    a[np.diag_indices(q)] = np.sqrt(rng.chisquare(df - np.arange(q)))
    low = np.tril_indices(q, -1)
    a[low] = rng.standard_normal(len(low[0]))
    la = l_scale @ a
    return la @ la.T


def sample_inverse_wishart(psi: np.ndarray, nu: float, rng: np.random.Generator) -> np.ndarray:
    """IW(psi, nu) draw (mean psi / (nu - q - 1)) by inverting a Wishart(psi^{-1}, nu) draw."""
    psi = np.asarray(psi, dtype=float)
    l_inv = cholesky(np.linalg.inv(psi), sym_tol=1e-8)
    w = sample_wishart_bartlett(l_inv, nu, rng)
    out = np.linalg.inv(w)
    return 0.5 * (out + out.T)


def sample_inverse_gamma(a, b, rng: np.random.Generator):
    """IG(a, b) draw(s) with density proportional to x^{-a-1} exp(-b/x)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("inverse-gamma shape and scale must be positive")
    draw = b / rng.standard_gamma(np.broadcast_to(a, np.broadcast(a, b).shape))
    return float(draw) if draw.ndim == 0 else draw


def to_linear_operator(matrix) -> LinearOperator:
    if sp.issparse(matrix) or isinstance(matrix, np.ndarray):
        return aslinearoperator(matrix)
    return matrix

"""Closed-form MNIW posteriors for the conjugate response and latent spatial models.

Both models fix the spatial correlation ``rho`` and the spatial proportion
``alpha``. They are dense (cubic cost) and intended as oracles and small-data
tools.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .kernels import Kernel, correlation_matrix
from .linalg import (NotPositiveDefiniteError, cholesky, is_spd, sample_inverse_wishart,
                     sample_matrix_normal, spd_inverse)

MAX_N = 5000


@dataclass(frozen=True)
class ConjugateConfig:
    """alpha in (0, 1], a fixed kernel and the MNIW prior (mu_beta, V_r, Psi, nu).

    ``V_r = None`` encodes a flat prior on beta.
    """

    alpha: float
    kernel: Kernel
    mu_beta: np.ndarray
    V_r: np.ndarray | None
    psi: np.ndarray
    nu: float

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.alpha <= 1:
            out.append(f"alpha = {self.alpha} must lie in (0, 1]")
        q = np.shape(self.psi)[0]
        if self.V_r is not None and not is_spd(np.asarray(self.V_r, float)):
            out.append("V_r is not symmetric positive definite")
        if not is_spd(np.asarray(self.psi, float)):
            out.append("Psi is not symmetric positive definite")
        if not self.nu > q + 1:
            out.append(f"nu = {self.nu} must exceed q + 1 = {q + 1}")
        return out

    @classmethod
    def default(cls, p: int, q: int, decay: float, alpha: float, nu: float | None = None,
                v_scale: float | None = 100.0) -> "ConjugateConfig":
        return cls(alpha=alpha, kernel=Kernel(decay), mu_beta=np.zeros((p, q)),
                   V_r=None if v_scale is None else v_scale * np.eye(p),
                   psi=np.eye(q), nu=q + 2.0 if nu is None else nu)


@dataclass(frozen=True)
class MniwPosterior:
    mu: np.ndarray
    V: np.ndarray
    psi: np.ndarray
    nu: float

    def sigma_mean(self) -> np.ndarray:
        q = self.psi.shape[0]
        return self.psi / (self.nu - q - 1)

    def mean_cov_row(self, i: int) -> np.ndarray:
        """Posterior covariance of row i of the coefficient matrix (Student-t form)."""
        return self.V[i, i] * self.sigma_mean()

    def sample(self, rng: np.random.Generator, size: int = 1):
        l_v = cholesky(self.V)
        out_g, out_s = [], []
        for _ in range(size):
            sig = sample_inverse_wishart(self.psi, self.nu, rng)
            out_s.append(sig)
            out_g.append(sample_matrix_normal(self.mu, l_v, cholesky(sig), rng))
        return np.array(out_g), np.array(out_s)


def _check_inputs(coords, Y, X):
    coords = np.atleast_2d(np.asarray(coords, float))
    Y = np.asarray(Y, float)
    X = np.asarray(X, float)
    n = coords.shape[0]
    if n > MAX_N:
        raise ValueError(f"conjugate models are dense; n = {n} exceeds the cap of {MAX_N}")
    if Y.ndim != 2 or Y.shape[0] != n or X.shape[0] != n:
        raise ValueError("coords, Y and X must have the same number of rows")
    if np.isnan(Y).any():
        raise ValueError("conjugate models need complete responses (no misalignment)")
    if n <= X.shape[1]:
        raise ValueError(f"need n > p, got n = {n}, p = {X.shape[1]}")
    if _has_duplicates(coords):
        raise ValueError("duplicate locations")
    return coords, Y, X


def _has_duplicates(coords: np.ndarray) -> bool:
    return np.unique(coords, axis=0).shape[0] < coords.shape[0]


def response_kernel(coords, kernel: Kernel, alpha: float) -> np.ndarray:
    """rho(S, S) + (1/alpha - 1) I."""
    rho = correlation_matrix(kernel, coords)
    return rho + (1.0 / alpha - 1.0) * np.eye(rho.shape[0])


def _dataset_arrays(dataset):
    return dataset.coords, dataset.Y, dataset.X


def response_posterior(dataset, config: ConjugateConfig) -> MniwPosterior:
    """MNIW posterior of (beta, Sigma) when Y ~ MN(X beta, rho + (1/alpha - 1) I, Sigma)."""
    coords, Y, X = _check_inputs(*_dataset_arrays(dataset))
    kmat = response_kernel(coords, config.kernel, config.alpha)
    try:
        kc = sla.cho_factor(kmat, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("spatial covariance K is singular") from None
    kx = sla.cho_solve(kc, X)
    ky = sla.cho_solve(kc, Y)
    mu_b = np.asarray(config.mu_beta, float)
    vr_inv = np.zeros((X.shape[1],) * 2) if config.V_r is None else spd_inverse(config.V_r)
    prec = X.T @ kx + vr_inv
    V = spd_inverse(prec)
    mu = V @ (X.T @ ky + vr_inv @ mu_b)
    psi = config.psi + Y.T @ ky + mu_b.T @ vr_inv @ mu_b - mu.T @ prec @ mu
    psi = 0.5 * (psi + psi.T)
    return MniwPosterior(mu=mu, V=V, psi=psi, nu=config.nu + Y.shape[0])


def _latent_ratio(alpha: float) -> float:
    if not alpha < 1:
        raise ValueError("the latent model needs alpha < 1 (a positive nugget)")
    return alpha / (1 - alpha)


def latent_posterior(dataset, config: ConjugateConfig, method: str = "blocks") -> MniwPosterior:
    """MNIW posterior of gamma = [beta; omega] and Sigma for the latent model.

    ``method="blocks"`` inverts the partitioned precision directly;
    ``method="augmented"`` solves the stacked least-squares system whose
    extra rows encode the priors of beta and omega.
    """
    coords, Y, X = _check_inputs(*_dataset_arrays(dataset))
    r = _latent_ratio(config.alpha)
    n, p = X.shape
    rho = correlation_matrix(config.kernel, coords)
    mu_b = np.asarray(config.mu_beta, float)
    if method == "blocks":
        vr_inv = np.zeros((p, p)) if config.V_r is None else spd_inverse(config.V_r)
        prec = np.block([[r * X.T @ X + vr_inv, r * X.T],
                         [r * X, spd_inverse(rho) + r * np.eye(n)]])
        V = spd_inverse(prec)
        mu = V @ np.vstack([r * X.T @ Y + vr_inv @ mu_b, r * Y])
        psi = config.psi + r * Y.T @ Y + mu_b.T @ vr_inv @ mu_b - mu.T @ prec @ mu
    elif method == "augmented":
        s = np.sqrt(r)
        v_rho = sla.solve_triangular(cholesky(rho), np.eye(n), lower=True)  # rho^{-1} = V^T V
        rows_x = [np.hstack([s * X, s * np.eye(n)])]
        rows_y = [s * Y]
        if config.V_r is not None:
            lr_inv = sla.solve_triangular(cholesky(config.V_r), np.eye(p), lower=True)
            rows_x.append(np.hstack([lr_inv, np.zeros((p, n))]))
            rows_y.append(lr_inv @ mu_b)
        rows_x.append(np.hstack([np.zeros((n, p)), v_rho]))
        rows_y.append(np.zeros((n, Y.shape[1])))
        xs, ys = np.vstack(rows_x), np.vstack(rows_y)
        q_, r_ = np.linalg.qr(xs)
        mu = sla.solve_triangular(r_, q_.T @ ys)
        r_inv = sla.solve_triangular(r_, np.eye(r_.shape[0]))
        V = r_inv @ r_inv.T
        resid = ys - xs @ mu
        psi = config.psi + resid.T @ resid
    else:
        raise ValueError(f"unknown method {method!r}")
    psi = 0.5 * (psi + psi.T)
    return MniwPosterior(mu=mu, V=0.5 * (V + V.T), psi=psi, nu=config.nu + n)


def consistency_diagnostic(coords, X, kernel: Kernel, alpha: float, sizes) -> np.ndarray:
    """Smallest eigenvalue of J(n) = X(n)^T K(n)^{-1} X(n) on nested leading subsets."""
    coords = np.atleast_2d(np.asarray(coords, float))
    X = np.asarray(X, float)
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("subset sizes must be strictly increasing")
    if sizes and (sizes[0] < 1 or sizes[-1] > coords.shape[0]):
        raise ValueError("subset sizes must lie in [1, n]")
    if sizes and sizes[-1] > MAX_N:
        raise ValueError(f"subset size {sizes[-1]} exceeds the cap of {MAX_N}")
    if _has_duplicates(coords[: sizes[-1]] if sizes else coords):
        raise ValueError("duplicate locations")
    out = []
    for n in sizes:
        kmat = response_kernel(coords[:n], kernel, alpha)
        kc = sla.cho_factor(kmat, lower=True)
        j = X[:n].T @ sla.cho_solve(kc, X[:n])
        out.append(float(np.linalg.eigvalsh(0.5 * (j + j.T))[0]))
    return np.array(out)

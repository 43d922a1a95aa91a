"""Posterior predictive draws at new locations and latent-process summaries."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import LocationSet, build_prediction_neighbors
from .kernels import Kernel
from .nngp import PredictionWeights, build_prediction_weights
from .sampler import PosteriorSamples


@dataclass(eq=False)
class PredictionResult:
    mean: np.ndarray      # n' x q
    var: np.ndarray       # n' x q
    lower: np.ndarray
    upper: np.ndarray
    level: float
    draws: np.ndarray | None = None      # S x n' x q
    F_draws: np.ndarray | None = None    # S x n' x K

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.var)

    def interval(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        if self.draws is None:
            raise ValueError("draws were not kept")
        return empirical_interval(self.draws, level)


def empirical_interval(draws: np.ndarray, level: float):
    if not 0 < level < 1:
        raise ValueError("interval level must lie in (0, 1)")
    lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return lo, hi


class WeightCache:
    """Prediction weights keyed by decay value (draws repeat a decay when proposals are rejected)."""

    def __init__(self, ref: LocationSet, new_coords: np.ndarray, m: int):
        self.ref = ref
        self.new = np.atleast_2d(np.asarray(new_coords, dtype=float))
        self.neigh = build_prediction_neighbors(ref, self.new, m)
        self.m = m
        self._store: dict[float, PredictionWeights] = {}

    def get(self, decay: float) -> PredictionWeights:
        w = self._store.get(decay)
        if w is None:
            w = build_prediction_weights(self.ref, self.new, Kernel(decay), self.m, self.neigh)
            self._store[decay] = w
        return w

    def prefetch(self, decays, threads: int = 1) -> None:
        todo = sorted({float(d) for d in np.ravel(decays)} - set(self._store))
        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(threads) as ex:
                built = list(ex.map(lambda d: build_prediction_weights(
                    self.ref, self.new, Kernel(d), self.m, self.neigh), todo))
            self._store.update(zip(todo, built))
        else:
            for d in todo:
                self.get(d)

    def __len__(self) -> int:
        return len(self._store)


def predict_factors(samples: PosteriorSamples, new_coords, rng: np.random.Generator,
                    m: int | None = None, threads: int = 1,
                    cache: WeightCache | None = None) -> np.ndarray:
    """Draw f_k(U) ~ N(A~ f_k, D~) for every kept F draw; returns S_f x n' x K."""
    if samples.F is None:
        raise ValueError("posterior samples carry no F draws")
    m = samples.config.m if m is None else m
    ref = LocationSet.from_coords(samples.coords)
    if cache is None:
        cache = WeightCache(ref, new_coords, m)
    psi = samples.psi[samples.f_draws]
    cache.prefetch(psi, threads)
    F_model = samples.F[:, ref.order, :]
    S, _, K = F_model.shape
    n_new = cache.new.shape[0]
    out = np.empty((S, n_new, K))
    for s in range(S):
        z = rng.standard_normal((n_new, K))
        for k in range(K):
            w = cache.get(float(psi[s, k]))
            out[s, :, k] = w.mean(F_model[s, :, k]) + np.sqrt(w.D) * z[:, k]
    return out


def predict_responses(samples: PosteriorSamples, F_U: np.ndarray, X_U, rng: np.random.Generator,
                      level: float = 0.95, keep_draws: bool = True) -> PredictionResult:
    """Y_U = X_U beta + F_U Lambda + E with rows of E iid N(0, Sigma), per kept draw."""
    X_U = np.atleast_2d(np.asarray(X_U, dtype=float))
    p = samples.beta.shape[1]
    if X_U.shape[1] != p:
        raise ValueError(f"X_U has {X_U.shape[1]} columns, model has p = {p}")
    if F_U.shape[1] != X_U.shape[0] or F_U.shape[2] != samples.K:
        raise ValueError(f"F_U shape {F_U.shape} does not match {X_U.shape[0]} new locations "
                         f"and K = {samples.K}")
    idx = samples.f_draws
    beta, lam, sigma = samples.beta[idx], samples.lam[idx], samples.sigma[idx]
    chol = np.linalg.cholesky(sigma)
    z = rng.standard_normal((idx.size, X_U.shape[0], beta.shape[2]))
    draws = (np.einsum("np,spq->snq", X_U, beta) + np.einsum("snk,skq->snq", F_U, lam)
             + np.einsum("snj,sqj->snq", z, chol))
    lo, hi = empirical_interval(draws, level)
    return PredictionResult(mean=draws.mean(axis=0), var=draws.var(axis=0, ddof=1) if
                            draws.shape[0] > 1 else np.zeros(draws.shape[1:]),
                            lower=lo, upper=hi, level=level,
                            draws=draws if keep_draws else None,
                            F_draws=F_U if keep_draws else None)


def predict(samples: PosteriorSamples, new_coords, X_U, rng: np.random.Generator,
            level: float = 0.95, threads: int = 1) -> PredictionResult:
    F_U = predict_factors(samples, new_coords, rng, threads=threads)
    return predict_responses(samples, F_U, X_U, rng, level=level)


def predict_missing(samples: PosteriorSamples, level: float = 0.95):
    """Posterior predictive of the unobserved training cells, read off the imputation draws.

    Returns ``(rows, result)``: the training rows with at least one missing
    cell and a PredictionResult over those rows (NaN at observed cells).
    """
    cells = samples.missing_cells
    rows, inv = np.unique(cells[:, 0], return_inverse=True)
    S = samples.y_imputed.shape[0]
    draws = np.full((S, rows.size, samples.beta.shape[2]), np.nan)
    draws[:, inv, cells[:, 1]] = samples.y_imputed
    shape = draws.shape[1:]
    mean, var, lo, hi = (np.full(shape, np.nan) for _ in range(4))
    if cells.size:
        d = samples.y_imputed
        lo_c, hi_c = empirical_interval(d, level)
        at = (inv, cells[:, 1])
        mean[at] = d.mean(axis=0)
        var[at] = d.var(axis=0, ddof=1) if S > 1 else 0.0
        lo[at], hi[at] = lo_c, hi_c
    return rows, PredictionResult(mean=mean, var=var, lower=lo, upper=hi, level=level,
                                  draws=draws)


def omega_covariance(omega: np.ndarray) -> np.ndarray:
    """(1/n) sum_i (w_i - w_bar)(w_i - w_bar)^T for an n x q latent matrix (or S x n x q)."""
    dev = omega - omega.mean(axis=-2, keepdims=True)
    return np.einsum("...ni,...nj->...ij", dev, dev) / omega.shape[-2]


def cov_to_corr(cov: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(cov))
    return cov / np.outer(sd, sd)


@dataclass(eq=False)
class LatentSummary:
    mean: np.ndarray       # n x q
    var: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    omega_cov: np.ndarray  # posterior mean of the finite-sample covariance, q x q
    omega_corr: np.ndarray


def latent_summary(samples: PosteriorSamples, level: float = 0.95,
                   centered: bool | None = None) -> LatentSummary:
    om = samples.omega(centered)
    lo, hi = empirical_interval(om, level)
    cov = omega_covariance(om).mean(axis=0)
    var = om.var(axis=0, ddof=1) if om.shape[0] > 1 else np.zeros(om.shape[1:])
    return LatentSummary(mean=om.mean(axis=0), var=var, lower=lo, upper=hi, level=level,
                         omega_cov=cov, omega_corr=cov_to_corr(cov))

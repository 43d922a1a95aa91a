"""Block-update Gibbs sampler with adaptive Metropolis steps for the decays.

One sweep updates, in order: the factor matrix F (perturbed least squares
solved by LSMR), the missing responses, (beta, Lambda, Sigma) jointly from
their MNIW / IG conditional, and each decay by a log-scale random walk.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .geometry import LocationSet, NeighborGraph, build_neighbor_graph
from .kernels import Kernel
from .linalg import (cholesky, lsmr_solve, make_rng, observed_noise_whiteners,
                     sample_inverse_gamma, sample_inverse_wishart)
from .model import (Dataset, FlatPrior, InverseWishartPrior, McmcState,
                    ModelConfig, Priors, SigmaMode, init_state, validate, warn_soft_issues)
from .nngp import NNGPFactor, build_factor

logger = logging.getLogger(__name__)

# Roberts-Rosenthal mixture: weight and variance of the fixed component
FIXED_WEIGHT = 0.05
FIXED_VAR = 0.01
ADAPT_SCALE = 2.38
VAR_FLOOR = 1e-12
# adaptive component is used only once this many burn-in samples are in
MIN_ADAPT = 20


class ValidationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SamplerError(RuntimeError):
    pass


# --- F block --------------------------------------------------------------

def prior_block(factors: list[NNGPFactor]) -> sp.csr_matrix:
    """Block-diagonal stack of the K whiteners D^{-1/2}(I - A)."""
    return sp.block_diag([f.whitener_matrix() for f in factors], format="csr")


def data_block(lam: np.ndarray, sigma: np.ndarray, observed: np.ndarray,
               residual: np.ndarray):
    """Whitened data rows of the stacked system and their right-hand side.

    ``residual`` is Y - X beta (only observed cells are read). Rows are
    grouped by observation pattern; columns index vec(F) factor-major.
    """
    n = observed.shape[0]
    K = lam.shape[0]
    rows, cols, vals, rhs = [], [], [], []
    offset = 0
    for locs, obs, w in observed_noise_whiteners(sigma, observed):
        L, r = locs.size, obs.size
        coef = w @ lam[:, obs].T                       # r x K
        row_id = offset + np.arange(L * r).reshape(L, r)
        rows.append(np.broadcast_to(row_id[:, :, None], (L, r, K)).ravel())
        col_id = np.arange(K)[None, None, :] * n + locs[:, None, None]
        cols.append(np.broadcast_to(col_id, (L, r, K)).ravel())
        vals.append(np.broadcast_to(coef[None, :, :], (L, r, K)).ravel())
        rhs.append((residual[np.ix_(locs, obs)] @ w.T).ravel())
        offset += L * r
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(offset, K * n))
    return mat, np.concatenate(rhs)


def stacked_system(state: McmcState, dataset: Dataset, factors: list[NNGPFactor],
                   prior: sp.csr_matrix | None = None):
    """(X~, Y~) of the augmented regression whose LS posterior is the F conditional."""
    resid = dataset.Y - dataset.X @ state.beta
    mat, rhs = data_block(state.lam, state.sigma, dataset.observed, resid)
    if prior is None:
        prior = prior_block(factors)
    xt = sp.vstack([mat, prior], format="csr")
    yt = np.concatenate([rhs, np.zeros(prior.shape[0])])
    return xt, yt


def sample_F(state: McmcState, dataset: Dataset, factors: list[NNGPFactor],
             rng: np.random.Generator, prior: sp.csr_matrix | None = None,
             max_iter: int | None = None) -> np.ndarray:
    """Draw F from N((X~'X~)^{-1} X~'Y~, (X~'X~)^{-1}).

    The perturbation has one standard-normal entry per row of X~ (data rows
    plus prior rows), which makes the LS solution an exact conditional draw.
    """
    xt, yt = stacked_system(state, dataset, factors, prior)
    u = rng.standard_normal(xt.shape[0])
    res = lsmr_solve(xt, yt + u, max_iter=max_iter)
    if not res.converged:
        raise SamplerError(f"LSMR did not converge for F after {res.iterations} iterations "
                           f"({res.reason})")
    n, K = dataset.n, len(factors)
    return res.x.reshape(K, n).T


# --- missing responses -----------------------------------------------------

def imputation_moments(state: McmcState, dataset: Dataset):
    """Conditional mean and covariance of the missing block at each incomplete location.

    Yields (location index, missing response indices, mean, covariance).
    """
    mu = dataset.X @ state.beta + state.F @ state.lam
    sigma = state.sigma
    patterns, inverse = np.unique(dataset.observed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    for g, pat in enumerate(patterns):
        ms = np.flatnonzero(~pat)
        if ms.size == 0:
            continue
        os_ = np.flatnonzero(pat)
        locs = np.flatnonzero(inverse == g)
        s_mo = sigma[np.ix_(ms, os_)]
        s_oo = sigma[np.ix_(os_, os_)]
        gain = sla.solve(s_oo, s_mo.T, assume_a="pos").T          # |ms| x |os|
        cov = sigma[np.ix_(ms, ms)] - gain @ s_mo.T
        cov = 0.5 * (cov + cov.T)
        dev = dataset.Y[np.ix_(locs, os_)] - mu[np.ix_(locs, os_)]
        mean = mu[np.ix_(locs, ms)] + dev @ gain.T
        yield locs, ms, mean, cov


def impute_missing(state: McmcState, dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
    y = state.y_filled.copy()
    for locs, ms, mean, cov in imputation_moments(state, dataset):
        chol = cholesky(cov, sym_tol=1e-8)
        z = rng.standard_normal(mean.shape)
        y[np.ix_(locs, ms)] = mean + z @ chol.T
    return y


# --- (beta, Lambda, Sigma) -------------------------------------------------

@dataclass
class MniwConditional:
    mu: np.ndarray          # (p + K) x q
    precision: np.ndarray   # X*'X*
    scatter: np.ndarray     # S* = (Y* - X* mu)'(Y* - X* mu)
    n: int


def gamma_sigma_conditional(y: np.ndarray, X: np.ndarray, F: np.ndarray,
                            priors: Priors) -> MniwConditional:
    """Augmented-regression posterior of gamma = [beta; Lambda] given F and complete Y."""
    n, p = X.shape
    K = F.shape[1]
    xs = [np.hstack([X, F])]
    ys = [y]
    if not isinstance(priors.beta, FlatPrior):
        lb_inv = sla.solve_triangular(cholesky(priors.beta.row_cov), np.eye(p), lower=True)
        xs.append(np.hstack([lb_inv, np.zeros((p, K))]))
        ys.append(lb_inv @ priors.beta.mean)
    if K:
        ll_inv = sla.solve_triangular(cholesky(priors.lam.row_cov), np.eye(K), lower=True)
        xs.append(np.hstack([np.zeros((K, p)), ll_inv]))
        ys.append(ll_inv @ priors.lam.mean)
    xstar = np.vstack(xs)
    ystar = np.vstack(ys)
    prec = xstar.T @ xstar
    try:
        mu = sla.cho_solve(sla.cho_factor(prec, lower=True), xstar.T @ ystar)
    except np.linalg.LinAlgError:
        raise SamplerError("X*'X* is singular (collinear design with a flat beta prior?)") from None
    resid = ystar - xstar @ mu
    return MniwConditional(mu=mu, precision=prec, scatter=resid.T @ resid, n=n)


def update_gamma_sigma(state: McmcState, dataset: Dataset, priors: Priors,
                       rng: np.random.Generator):
    """Draw (beta, Lambda, Sigma) from their joint conditional given F and filled Y."""
    p = dataset.p
    cond = gamma_sigma_conditional(state.y_filled, dataset.X, state.F, priors)
    sig = priors.sigma
    if isinstance(sig, InverseWishartPrior):
        sigma = sample_inverse_wishart(sig.psi + cond.scatter, sig.nu + cond.n, rng)
    else:
        shape = sig.a + cond.n / 2.0
        scale = np.asarray(sig.b, dtype=float) + 0.5 * np.diag(cond.scatter)
        sigma = np.diag(sample_inverse_gamma(np.full(scale.shape, shape), scale, rng))
    l_v = cholesky(cond.precision, sym_tol=1e-8)
    l_s = cholesky(sigma, sym_tol=1e-8)
    z = rng.standard_normal(cond.mu.shape)
    gamma = cond.mu + sla.solve_triangular(l_v.T, z, lower=False) @ l_s.T
    return gamma[:p], gamma[p:], sigma


# --- decays ---------------------------------------------------------------

@dataclass
class AdaptiveProposal:
    """Per-decay running moments of log(psi) (Welford), updated during burn-in only."""

    mean: np.ndarray
    m2: np.ndarray
    count: int = 0
    adapting: bool = True

    @classmethod
    def start(cls, K: int) -> "AdaptiveProposal":
        return cls(mean=np.zeros(K), m2=np.zeros(K))

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.full(self.mean.shape, VAR_FLOOR)
        return np.maximum(self.m2 / (self.count - 1), VAR_FLOOR)

    def observe(self, log_psi: np.ndarray) -> None:
        if not self.adapting:
            return
        self.count += 1
        delta = log_psi - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (log_psi - self.mean)

    def draw(self, log_psi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Mixture 0.95 N(x, 2.38^2 s^2) + 0.05 N(x, 0.01), componentwise."""
        K = log_psi.shape[0]
        pick_fixed = rng.random(K) < FIXED_WEIGHT
        z = rng.standard_normal(K)
        if self.count < MIN_ADAPT:
            pick_fixed[:] = True
        sd = np.where(pick_fixed, math.sqrt(FIXED_VAR), ADAPT_SCALE * np.sqrt(self.variance()))
        return log_psi + sd * z


def log_accept_ratio(f: np.ndarray, current: NNGPFactor, proposed: NNGPFactor,
                     prior, psi: float, psi_new: float) -> float:
    """Log MH ratio on the log-decay scale, including the Jacobian term."""
    lp_new = prior.logpdf(psi_new)
    if not math.isfinite(lp_new):
        return -math.inf
    return (proposed.log_density(f) + lp_new + math.log(psi_new)
            - current.log_density(f) - prior.logpdf(psi) - math.log(psi))


def update_psi(state: McmcState, factors: list[NNGPFactor], priors: Priors,
               proposal: AdaptiveProposal, graph: NeighborGraph, locs: LocationSet,
               rng: np.random.Generator, executor: ThreadPoolExecutor | None = None):
    """One Metropolis step per decay. Returns (psi, factors, accepted flags)."""
    K = state.psi.shape[0]
    log_psi = np.log(state.psi)
    log_new = proposal.draw(log_psi, rng)
    psi_new = np.exp(log_new)
    log_u = np.log(rng.random(K))
    in_support = np.array([math.isfinite(priors.decay[k].logpdf(psi_new[k])) for k in range(K)])

    def build(k):
        if not in_support[k]:
            return None
        return build_factor(graph, locs, Kernel(float(psi_new[k])))

    ks = range(K)
    proposed = list(executor.map(build, ks)) if executor is not None else [build(k) for k in ks]
    psi = state.psi.copy()
    out = list(factors)
    accepted = np.zeros(K, dtype=bool)
    for k in ks:
        if proposed[k] is None:
            continue
        ratio = log_accept_ratio(state.F[:, k], factors[k], proposed[k], priors.decay[k],
                                 state.psi[k], psi_new[k])
        if log_u[k] < ratio:
            psi[k] = psi_new[k]
            out[k] = proposed[k]
            accepted[k] = True
    proposal.observe(np.log(psi))
    return psi, out, accepted


# --- driver ---------------------------------------------------------------

@dataclass
class PosteriorSamples:
    """Retained draws; location-indexed arrays are in the dataset's storage order."""

    beta: np.ndarray                 # S x p x q
    lam: np.ndarray                  # S x K x q
    sigma: np.ndarray                # S x q x q
    psi: np.ndarray                  # S x K
    F: np.ndarray | None             # S_f x n x K
    f_draws: np.ndarray              # indices (into S) of draws whose F is kept
    y_imputed: np.ndarray            # S x n_missing
    missing_cells: np.ndarray        # n_missing x 2 (row, response)
    acceptance: np.ndarray           # K, post burn-in acceptance rate
    omega_mean: np.ndarray           # n x q running mean of (centered) omega
    omega_var: np.ndarray            # n x q running variance
    coords: np.ndarray
    X: np.ndarray
    config: ModelConfig
    sigma_mode: SigmaMode = SigmaMode.FULL
    elapsed: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.lam.shape[1]

    def omega(self, centered: bool | None = None) -> np.ndarray:
        """Per-kept-F-draw latent process F Lambda, plus the intercept row when centered."""
        if self.F is None:
            raise ValueError("no F draws were retained")
        centered = self.config.intercept if centered is None else centered
        lam = self.lam[self.f_draws]
        om = np.einsum("snk,skq->snq", self.F, lam)
        if centered:
            om = om + self.beta[self.f_draws, 0, None, :]
        return om


def _make_factors(graph, locs, psi, executor):
    def build(k):
        return build_factor(graph, locs, Kernel(float(psi[k])))
    ks = range(len(psi))
    return list(executor.map(build, ks)) if executor is not None else [build(k) for k in ks]


def run_mcmc(dataset: Dataset, priors: Priors, config: ModelConfig,
             rng: np.random.Generator | None = None, progress=None) -> PosteriorSamples:
    problems = validate(dataset, priors, config)
    if problems:
        raise ValidationError(problems)
    warn_soft_issues(dataset, config)
    if rng is None:
        rng = make_rng(config.seed)
    t0 = time.perf_counter()

    order = dataset.locs.order
    ds = dataset.take(order)          # model order from here on
    locs = LocationSet(coords=ds.coords, order=np.arange(ds.n))
    graph = build_neighbor_graph(locs, config.m)
    state = init_state(ds, priors, config, rng)
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    n, q, p, K = ds.n, ds.q, ds.p, config.K

    try:
        factors = _make_factors(graph, locs, state.psi, executor)
        proposal = AdaptiveProposal.start(K)
        n_keep, thin = config.n_keep, config.thin
        total = config.n_burn + n_keep * thin
        keep_f = np.arange(0, n_keep, config.f_thin)
        beta_s = np.empty((n_keep, p, q))
        lam_s = np.empty((n_keep, K, q))
        sig_s = np.empty((n_keep, q, q))
        psi_s = np.empty((n_keep, K))
        F_s = np.empty((keep_f.size, n, K))
        mrow, mcol = np.nonzero(~dataset.observed)      # storage order
        inv_order = np.empty(n, dtype=np.int64)
        inv_order[order] = np.arange(n)
        mrow_model = inv_order[mrow]
        yimp_s = np.empty((n_keep, mrow.size))
        om_mean = np.zeros((n, q))
        om_m2 = np.zeros((n, q))
        accepted = np.zeros(K)
        prior = prior_block(factors)
        s = 0
        for it in range(total):
            try:
                state.F = sample_F(state, ds, factors, rng, prior=prior,
                                   max_iter=config.max_lsmr_iter)
                state.y_filled = impute_missing(state, ds, rng)
                state.beta, state.lam, state.sigma = update_gamma_sigma(state, ds, priors, rng)
                proposal.adapting = it < config.n_burn
                psi, new_factors, acc = update_psi(state, factors, priors, proposal, graph,
                                                   locs, rng, executor)
            except (SamplerError, np.linalg.LinAlgError, ValueError) as exc:
                raise SamplerError(f"sweep {it}: {exc}") from exc
            if acc.any():
                factors = new_factors
                prior = prior_block(factors)
            state.psi = psi
            state.iteration = it + 1
            if it >= config.n_burn:
                accepted += acc
                if (it - config.n_burn) % thin == 0:
                    beta_s[s], lam_s[s], sig_s[s], psi_s[s] = (state.beta, state.lam,
                                                               state.sigma, state.psi)
                    yimp_s[s] = state.y_filled[mrow_model, mcol]
                    om = state.F @ state.lam
                    if config.intercept:
                        om = om + state.beta[0]
                    delta = om - om_mean
                    om_mean += delta / (s + 1)
                    om_m2 += delta * (om - om_mean)
                    if s % config.f_thin == 0:
                        F_s[s // config.f_thin][order] = state.F
                    s += 1
            if progress is not None:
                progress(it, total, state)
    finally:
        if executor is not None:
            executor.shutdown()

    omega_mean = np.empty_like(om_mean)
    omega_mean[order] = om_mean
    omega_var = np.empty_like(om_m2)
    omega_var[order] = om_m2 / max(n_keep - 1, 1)
    n_post = total - config.n_burn
    return PosteriorSamples(
        beta=beta_s, lam=lam_s, sigma=sig_s, psi=psi_s, F=F_s, f_draws=keep_f,
        y_imputed=yimp_s, missing_cells=np.column_stack([mrow, mcol]).astype(np.int64),
        acceptance=accepted / max(n_post, 1), omega_mean=omega_mean, omega_var=omega_var,
        coords=dataset.coords.copy(), X=dataset.X.copy(), config=config,
        sigma_mode=config.sigma_mode, elapsed=time.perf_counter() - t0,
        meta={"neighbors_nnz": graph.nnz})

import math

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.stats import multivariate_normal

from blmc.geometry import LocationSet, build_neighbor_graph
from blmc.kernels import Kernel
from blmc.linalg import make_rng
from blmc.metrics import mcse
from blmc.model import (Dataset, FlatPrior, InverseGammaPrior, InverseWishartPrior,
                        MatrixNormalPrior, McmcState, ModelConfig, Priors, UniformPrior)
from blmc.nngp import build_factor
from blmc.sampler import (AdaptiveProposal, SamplerError, ValidationError,
                          gamma_sigma_conditional, imputation_moments, impute_missing,
                          log_accept_ratio, run_mcmc, sample_F, stacked_system,
                          update_gamma_sigma, update_psi)
from blmc.simdata import builtin_fixture, generate, truncate_fixture
from conftest import exp_corr
from oracles import dense_f_conditional, f_problem, mc_z_scores


def test_stacked_system_normal_equations(rng):
    ds, state, factors, covs, *_ = f_problem(1, missing=True)
    xt, yt = stacked_system(state, ds, factors)
    mean, cov = dense_f_conditional(ds, state, covs)
    xtx = (xt.T @ xt).toarray()
    np.testing.assert_allclose(np.linalg.inv(xtx), cov, atol=1e-8)
    np.testing.assert_allclose(np.linalg.solve(xtx, xt.T @ yt), mean, atol=1e-8)
    assert xt.shape[0] == ds.observed.sum() + 2 * ds.n


def test_sample_F_prior_reversion():
    ds, state, factors, covs, *_ = f_problem(2, n=15, lam_scale=0.0)
    rng = make_rng(3)
    draws = np.array([sample_F(state, ds, factors, rng).T.ravel() for _ in range(5000)])
    zm, zc = mc_z_scores(draws, np.zeros(30), block_diag(*covs))
    assert zm.max() < 4 and zc.max() < 4.5


def test_full_row_perturbation_is_required():
    """Perturbing only the prior rows leaves the data rows noiseless and shrinks the spread."""
    from blmc.linalg import lsmr_solve
    ds, state, factors, covs, *_ = f_problem(4)
    xt, yt = stacked_system(state, ds, factors)
    n_data = xt.shape[0] - 2 * ds.n
    rng = make_rng(5)
    draws = []
    for _ in range(2000):
        u = np.r_[np.zeros(n_data), rng.standard_normal(2 * ds.n)]
        draws.append(lsmr_solve(xt, yt + u).x)
    _, cov = dense_f_conditional(ds, state, covs)
    emp = np.var(np.array(draws), axis=0)
    assert np.median(emp / np.diag(cov)) < 0.8


def test_imputation_diagonal_sigma_no_cross_learning():
    ds, state, factors, covs, *_ = f_problem(6, missing=True)
    state.sigma = np.diag([0.5, 2.0])
    state.F = np.random.default_rng(0).standard_normal(state.F.shape)
    mu = ds.X @ state.beta + state.F @ state.lam
    for locs, ms, mean, cov in imputation_moments(state, ds):
        np.testing.assert_allclose(mean, mu[np.ix_(locs, ms)], atol=1e-14)
        np.testing.assert_allclose(cov, state.sigma[np.ix_(ms, ms)], atol=1e-14)


def test_imputation_bivariate_formula():
    ds, state, *_ = f_problem(7, missing=True)
    state.F = np.random.default_rng(1).standard_normal(state.F.shape)
    s = state.sigma
    mu = ds.X @ state.beta + state.F @ state.lam
    checked = 0
    for locs, ms, mean, cov in imputation_moments(state, ds):
        (m,), (o,) = ms, [1 - ms[0]]
        for r, i in enumerate(locs):
            expected = mu[i, m] + s[m, o] / s[o, o] * (ds.Y[i, o] - mu[i, o])
            assert mean[r, 0] == pytest.approx(expected, abs=1e-12)
            checked += 1
        assert cov[0, 0] == pytest.approx(s[m, m] - s[m, o] ** 2 / s[o, o], abs=1e-12)
    assert checked > 0


def test_impute_no_missing_unchanged():
    ds, state, *_ = f_problem(8)
    out = impute_missing(state, ds, make_rng(0))
    np.testing.assert_array_equal(out, state.y_filled)


def _dense_mniw(y, X, F, V_b, mu_b, V_l, mu_l):
    """Posterior of [beta; Lambda] in the textbook (non-augmented) form."""
    W = np.hstack([X, F])
    V0_inv = block_diag(np.linalg.inv(V_b), np.linalg.inv(V_l))
    M0 = np.vstack([mu_b, mu_l])
    prec = W.T @ W + V0_inv
    mu = np.linalg.solve(prec, W.T @ y + V0_inv @ M0)
    scatter = y.T @ y + M0.T @ V0_inv @ M0 - mu.T @ prec @ mu
    return mu, prec, scatter


def test_mniw_conditional_matches_textbook(rng):
    n, p, K, q = 12, 2, 2, 3
    X = np.c_[np.ones(n), rng.standard_normal(n)]
    F = rng.standard_normal((n, K))
    y = rng.standard_normal((n, q))
    V_b, mu_b = 4 * np.eye(p), rng.standard_normal((p, q))
    V_l, mu_l = np.array([[2.0, 0.3], [0.3, 1.0]]), rng.standard_normal((K, q))
    pri = Priors(beta=MatrixNormalPrior(mu_b, V_b), lam=MatrixNormalPrior(mu_l, V_l),
                 sigma=InverseWishartPrior(np.eye(q), q + 2.0), decay=(UniformPrior(1, 2),) * K)
    cond = gamma_sigma_conditional(y, X, F, pri)
    mu, prec, scatter = _dense_mniw(y, X, F, V_b, mu_b, V_l, mu_l)
    np.testing.assert_allclose(cond.mu, mu, atol=1e-10)
    np.testing.assert_allclose(cond.precision, prec, atol=1e-10)
    np.testing.assert_allclose(cond.scatter, scatter, atol=1e-9)


def test_regression_only_matches_ridge(rng):
    n, p, q = 10, 3, 2
    X = rng.standard_normal((n, p))
    y = rng.standard_normal((n, q))
    V_b = 2.0 * np.eye(p)
    pri = Priors(beta=MatrixNormalPrior(np.zeros((p, q)), V_b),
                 lam=MatrixNormalPrior(np.zeros((0, q)), np.eye(0)),
                 sigma=InverseWishartPrior(np.eye(q), 4.0), decay=())
    cond = gamma_sigma_conditional(y, X, np.zeros((n, 0)), pri)
    ridge = np.linalg.solve(X.T @ X + 0.5 * np.eye(p), X.T @ y)
    np.testing.assert_allclose(cond.mu, ridge, atol=1e-12)


def _fixed_state_problem(rng, n=10, q=2, K=1):
    X = np.c_[np.ones(n), rng.standard_normal(n)]
    F = rng.standard_normal((n, K))
    y = rng.standard_normal((n, q)) + X @ np.array([[1.0, -1.0], [2.0, 0.5]])
    ds = Dataset.from_arrays(rng.random((n, 2)), y, X)
    state = McmcState(beta=np.zeros((2, q)), lam=np.zeros((K, q)), sigma=np.eye(q), F=F,
                      psi=np.ones(K), y_filled=y)
    return ds, state


def test_gamma_sigma_full_draw_moments(rng):
    ds, state = _fixed_state_problem(rng)
    pri = Priors.default(2, 2, 1, "full")
    cond = gamma_sigma_conditional(state.y_filled, ds.X, state.F, pri)
    r = make_rng(21)
    draws = [update_gamma_sigma(state, ds, pri, r) for _ in range(20000)]
    beta = np.array([d[0] for d in draws])
    sig = np.array([d[2] for d in draws])
    nu_star = pri.sigma.nu + ds.n
    assert nu_star == 13
    sig_mean = (pri.sigma.psi + cond.scatter) / (nu_star - 2 - 1)
    se = sig.std(axis=0) / np.sqrt(len(sig))
    assert np.all(np.abs(sig.mean(axis=0) - sig_mean) < 3.5 * se)
    se_b = beta.std(axis=0) / np.sqrt(len(beta))
    assert np.all(np.abs(beta.mean(axis=0) - cond.mu[:2]) < 3.5 * se_b)


def test_gamma_sigma_diag_draw_moments(rng):
    ds, state = _fixed_state_problem(rng)
    pri = Priors(beta=FlatPrior(), lam=MatrixNormalPrior(np.zeros((1, 2)), 25 * np.eye(1)),
                 sigma=InverseGammaPrior(2.0, np.array([1.0, 0.5])),
                 decay=(UniformPrior(1, 2),))
    cond = gamma_sigma_conditional(state.y_filled, ds.X, state.F, pri)
    r = make_rng(22)
    sig = np.array([update_gamma_sigma(state, ds, pri, r)[2] for _ in range(20000)])
    assert np.all(sig[:, 0, 1] == 0)
    a_star = 2.0 + ds.n / 2
    b_star = np.array([1.0, 0.5]) + 0.5 * np.diag(cond.scatter)
    d = sig[:, [0, 1], [0, 1]]
    se = d.std(axis=0) / np.sqrt(len(d))
    assert np.all(np.abs(d.mean(axis=0) - b_star / (a_star - 1)) < 3.5 * se)


def test_singular_design_flat_prior(rng):
    ds, state = _fixed_state_problem(rng)
    X = np.c_[ds.X, ds.X[:, 1]]
    with pytest.raises(SamplerError, match="singular"):
        gamma_sigma_conditional(state.y_filled, X, state.F, Priors.default(2, 3, 1))


def test_accept_ratio_dense_oracle():
    rng = np.random.default_rng(9)
    pts = rng.random((5, 2))
    locs = LocationSet.from_coords(pts)
    g = build_neighbor_graph(locs, 4)
    f = rng.standard_normal(5)
    prior = UniformPrior(2.12, 212.0)
    cur, new = build_factor(g, locs, Kernel(5.0)), build_factor(g, locs, Kernel(9.0))
    x = locs.ordered
    dense = (multivariate_normal(np.zeros(5), exp_corr(x, x, 9.0)).logpdf(f)
             - multivariate_normal(np.zeros(5), exp_corr(x, x, 5.0)).logpdf(f)
             + math.log(9.0 / 5.0))
    assert log_accept_ratio(f, cur, new, prior, 5.0, 9.0) == pytest.approx(dense, abs=1e-8)
    assert log_accept_ratio(f, cur, new, prior, 5.0, 300.0) == -math.inf


def test_update_psi_rejects_out_of_support():
    ds, state, factors, covs, graph, locs = f_problem(10, n=12, K=2)
    pri = Priors.default(2, 2, 2, decay=UniformPrior(2.12, 212.0))
    state.psi = np.array([211.99, 2.1201])
    prop = AdaptiveProposal.start(2)
    prop.count = 50
    prop.m2 = np.full(2, 49 * 400.0)     # huge proposal variance: almost always outside
    rng = make_rng(0)
    for _ in range(30):
        psi, out, acc = update_psi(state, factors, pri, prop, graph, locs, rng)
        for k in range(2):
            if not acc[k]:
                assert psi[k] == state.psi[k] and out[k] is factors[k]
            else:
                assert 2.12 <= psi[k] <= 212.0


def test_adaptive_proposal_fixed_component_until_warm():
    prop = AdaptiveProposal.start(3)
    rng = make_rng(1)
    steps = np.array([prop.draw(np.zeros(3), rng) for _ in range(4000)])
    assert steps.std() == pytest.approx(0.1, rel=0.05)
    for v in np.linspace(0, 1, 30):
        prop.observe(np.full(3, v))
    assert np.allclose(prop.variance(), np.var(np.linspace(0, 1, 30), ddof=1))
    prop.adapting = False
    before = prop.count
    prop.observe(np.zeros(3))
    assert prop.count == before


@pytest.fixture(scope="module")
def small_sim():
    return generate(truncate_fixture(builtin_fixture("sim1"), 150), make_rng(11))


def test_run_mcmc_deterministic_and_valid(small_sim):
    ds = small_sim.train
    cfg = ModelConfig(K=2, m=8, n_burn=60, n_keep=40, thin=2, seed=5, f_thin=4)
    pri = Priors.default(2, 2, 2)
    a = run_mcmc(ds, pri, cfg)
    b = run_mcmc(ds, pri, cfg)
    for name in ("beta", "lam", "sigma", "psi", "F", "omega_mean"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.n_draws == 40 and a.F.shape == (10, ds.n, 2)
    assert np.all(np.linalg.eigvalsh(a.sigma) > 0)
    assert np.all((a.psi >= 2.12) & (a.psi <= 212))
    # F is returned in storage order: omega running mean equals mean of F Lambda + intercept
    om = a.omega()
    assert om.shape == (10, ds.n, 2)


def test_run_mcmc_threads_identical(small_sim):
    ds = small_sim.train
    pri = Priors.default(2, 2, 2)
    a = run_mcmc(ds, pri, ModelConfig(K=2, n_burn=20, n_keep=10, seed=1, threads=1))
    b = run_mcmc(ds, pri, ModelConfig(K=2, n_burn=20, n_keep=10, seed=1, threads=3))
    np.testing.assert_array_equal(a.psi, b.psi)
    np.testing.assert_array_equal(a.F, b.F)


def test_run_mcmc_validation(small_sim):
    with pytest.raises(ValidationError) as exc:
        run_mcmc(small_sim.train, Priors.default(2, 2, 2), ModelConfig(K=2, n_keep=0))
    assert any("n_keep" in p for p in exc.value.problems)


def test_run_mcmc_sweep_error_names_sweep(small_sim):
    cfg = ModelConfig(K=2, n_burn=3, n_keep=2, max_lsmr_iter=1)
    with pytest.raises(SamplerError, match="sweep 0"):
        run_mcmc(small_sim.train, Priors.default(2, 2, 2), cfg)


def test_run_mcmc_with_missing_values(small_sim):
    from blmc.simdata import RandomFraction, apply_misalignment
    ds, hold = apply_misalignment(small_sim.train, RandomFraction(0.3), make_rng(2))
    s = run_mcmc(ds, Priors.default(2, 2, 1), ModelConfig(K=1, n_burn=20, n_keep=10))
    assert s.y_imputed.shape == (10, int((~ds.observed).sum()))
    assert np.all(np.isfinite(s.y_imputed))
    assert np.all(~ds.observed[s.missing_cells[:, 0], s.missing_cells[:, 1]])


def test_gibbs_matches_conjugate_beta_posterior():
    """psi, Lambda, Sigma fixed: the (F, beta) Gibbs chain targets the collapsed posterior of beta."""
    rng = np.random.default_rng(31)
    n = 10
    pts = rng.random((n, 2))
    locs = LocationSet.from_coords(pts)
    pts = locs.ordered
    locs = LocationSet(coords=pts, order=np.arange(n))
    X = np.c_[np.ones(n), rng.standard_normal(n)]
    lam, sig2, phi = 1.3, 0.5, 4.0
    y = X @ [[1.0], [-2.0]] + rng.standard_normal((n, 1))
    ds = Dataset.from_arrays(pts, y, X)
    fac = [build_factor(build_neighbor_graph(locs, n - 1), locs, Kernel(phi))]
    V_b = 10 * np.eye(2)
    # closed form: y ~ N(X beta, lam^2 rho + sig2 I), beta ~ N(0, V_b)
    C = lam ** 2 * exp_corr(pts, pts, phi) + sig2 * np.eye(n)
    prec = X.T @ np.linalg.solve(C, X) + np.linalg.inv(V_b)
    post_cov = np.linalg.inv(prec)
    post_mean = post_cov @ X.T @ np.linalg.solve(C, y[:, 0])

    state = McmcState(beta=np.zeros((2, 1)), lam=np.array([[lam]]), sigma=np.array([[sig2]]),
                      F=np.zeros((n, 1)), psi=np.array([phi]), y_filled=y)
    r = make_rng(32)
    A = X.T @ X / sig2 + np.linalg.inv(V_b)
    A_inv = np.linalg.inv(A)
    L = np.linalg.cholesky(A_inv)
    chain = []
    for it in range(12000):
        state.F = sample_F(state, ds, fac, r)
        m = A_inv @ X.T @ (y[:, 0] - lam * state.F[:, 0]) / sig2
        state.beta = (m + L @ r.standard_normal(2))[:, None]
        if it >= 1000:
            chain.append(state.beta[:, 0].copy())
    chain = np.array(chain)
    for j in range(2):
        se = mcse(chain[:, j])
        assert abs(chain[:, j].mean() - post_mean[j]) < 3 * se
    np.testing.assert_allclose(chain.var(axis=0), np.diag(post_cov), rtol=0.1)

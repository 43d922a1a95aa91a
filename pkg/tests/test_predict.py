import numpy as np
import pytest

from blmc.geometry import LocationSet
from blmc.linalg import make_rng
from blmc.model import ModelConfig
from blmc.predict import (WeightCache, cov_to_corr, empirical_interval, latent_summary,
                          omega_covariance, predict_factors, predict_missing, predict_responses)
from blmc.sampler import PosteriorSamples
from conftest import exp_corr


def fake_samples(rng, n=12, S=3, K=2, q=2, p=2, missing=()):
    coords = rng.random((n, 2))
    F = rng.standard_normal((S, n, K))
    cells = np.array(missing, dtype=np.int64).reshape(-1, 2)
    return PosteriorSamples(
        beta=rng.standard_normal((S, p, q)), lam=rng.standard_normal((S, K, q)),
        sigma=np.repeat(np.array([[[0.5, 0.1], [0.1, 0.3]]]), S, axis=0)[:, :q, :q],
        psi=np.tile([3.0, 7.0][:K], (S, 1)), F=F, f_draws=np.arange(S),
        y_imputed=rng.standard_normal((S, len(cells))), missing_cells=cells,
        acceptance=np.zeros(K), omega_mean=np.zeros((n, q)), omega_var=np.zeros((n, q)),
        coords=coords, X=np.c_[np.ones(n), rng.standard_normal(n)][:, :p],
        config=ModelConfig(K=K, m=n - 1))


def test_predict_factors_matches_dense_kriging(rng):
    s = fake_samples(rng, n=12, S=1)
    new = rng.random((4, 2))
    draws = np.array([predict_factors(s, new, make_rng(i))[0] for i in range(3000)])
    for k, phi in enumerate((3.0, 7.0)):
        C = exp_corr(s.coords, s.coords, phi)
        c = exp_corr(new, s.coords, phi)
        mean = c @ np.linalg.solve(C, s.F[0, :, k])
        var = 1 - np.einsum("ij,ji->i", c, np.linalg.solve(C, c.T))
        se = np.sqrt(var / draws.shape[0])
        assert np.all(np.abs(draws[:, :, k].mean(axis=0) - mean) < 4 * se)
        np.testing.assert_allclose(draws[:, :, k].var(axis=0), var, rtol=0.12)


def test_predict_at_training_location_returns_training_value(rng):
    s = fake_samples(rng, n=10, S=2)
    out = predict_factors(s, s.coords[[3, 7]], make_rng(0))
    np.testing.assert_allclose(out, s.F[:, [3, 7], :], atol=1e-10)


def test_weight_cache_reuses_decays(rng):
    s = fake_samples(rng, S=4)
    cache = WeightCache(LocationSet.from_coords(s.coords), rng.random((3, 2)), 5)
    predict_factors(s, cache.new, make_rng(0), cache=cache)
    assert len(cache) == 2


def test_prediction_threads_do_not_change_draws(rng):
    s = fake_samples(rng, S=4)
    s.psi = rng.uniform(2, 9, size=(4, 2))
    new = rng.random((5, 2))
    a = predict_factors(s, new, make_rng(1), threads=1)
    b = predict_factors(s, new, make_rng(1), threads=4)
    np.testing.assert_array_equal(a, b)


def test_predict_responses_composition(rng):
    s = fake_samples(rng, S=2)
    F_U = rng.standard_normal((2, 3, 2))
    X_U = np.c_[np.ones(3), [0.5, -1.0, 2.0]]
    s.sigma[:] = np.diag([1e-24, 1e-24])   # noise off
    res = predict_responses(s, F_U, X_U, make_rng(0))
    expect = np.einsum("np,spq->snq", X_U, s.beta) + np.einsum("snk,skq->snq", F_U, s.lam)
    np.testing.assert_allclose(res.draws, expect, atol=1e-9)
    assert np.all(res.lower <= res.mean) and np.all(res.mean <= res.upper)


def test_predict_responses_shape_errors(rng):
    s = fake_samples(rng, S=2)
    with pytest.raises(ValueError, match="columns"):
        predict_responses(s, np.zeros((2, 3, 2)), np.ones((3, 3)), make_rng(0))
    with pytest.raises(ValueError, match="F_U shape"):
        predict_responses(s, np.zeros((2, 4, 2)), np.ones((3, 2)), make_rng(0))


def test_intervals_nest_with_level(rng):
    draws = rng.standard_normal((400, 6, 2))
    lo90, hi90 = empirical_interval(draws, 0.9)
    lo50, hi50 = empirical_interval(draws, 0.5)
    assert np.all(lo90 <= lo50) and np.all(hi50 <= hi90)
    with pytest.raises(ValueError):
        empirical_interval(draws, 1.0)


def test_predict_missing_layout(rng):
    s = fake_samples(rng, S=5, missing=[(2, 0), (2, 1), (7, 1)])
    rows, res = predict_missing(s, level=0.9)
    np.testing.assert_array_equal(rows, [2, 7])
    assert np.isnan(res.mean[1, 0])
    np.testing.assert_allclose(res.mean[1, 1], s.y_imputed[:, 2].mean())
    np.testing.assert_allclose(res.var[0, 0], s.y_imputed[:, 0].var(ddof=1))
    assert res.draws.shape == (5, 2, 2)


def test_predict_missing_none(rng):
    rows, res = predict_missing(fake_samples(rng))
    assert rows.size == 0 and res.mean.shape == (0, 2)


def test_omega_correlation_hand_case():
    cov = np.array([[1.675e-2, -6.873e-3], [-6.873e-3, 3.764e-3]])
    assert cov_to_corr(cov)[0, 1] == pytest.approx(-0.8656, abs=5e-4)


def test_omega_covariance_formula(rng):
    om = rng.standard_normal((30, 3))
    np.testing.assert_allclose(omega_covariance(om), np.cov(om.T, bias=True), atol=1e-14)


def test_latent_summary_centering(rng):
    s = fake_samples(rng, S=4)
    raw = latent_summary(s, centered=False)
    cen = latent_summary(s, centered=True)
    shift = np.broadcast_to(s.beta[:, 0].mean(axis=0), raw.mean.shape)
    np.testing.assert_allclose(cen.mean - raw.mean, shift, atol=1e-12)
    np.testing.assert_allclose(cen.omega_cov, raw.omega_cov, atol=1e-12)
    np.testing.assert_allclose(np.diag(cen.omega_corr), 1.0)

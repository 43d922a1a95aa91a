import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from blmc.metrics import (coverage, crps_gaussian, diagnose_chains, ess, interval_score, mcse,
                          msel, rmspe, score_predictions)


def crps_quadrature(mu, sigma, y):
    f = norm(mu, sigma).cdf
    lo = quad(lambda x: f(x) ** 2, -np.inf, y, epsabs=1e-12)[0]
    hi = quad(lambda x: (f(x) - 1) ** 2, y, np.inf, epsabs=1e-12)[0]
    return lo + hi


def test_rmspe_hand_case():
    assert rmspe([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert rmspe([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert msel([1.0, 3.0], [0.0, 0.0]) == 5.0


def test_rmspe_shape_mismatch():
    with pytest.raises(ValueError):
        rmspe([1.0, 2.0], [1.0])


@pytest.mark.parametrize("mu,sigma,y", [(0, 1, 0.5), (1.5, 0.3, -0.2), (-2, 4, 7), (0, 1, 0)])
def test_crps_matches_quadrature(mu, sigma, y):
    assert crps_gaussian(mu, sigma, y) == pytest.approx(crps_quadrature(mu, sigma, y), abs=1e-6)


def test_crps_degenerate_and_errors():
    assert crps_gaussian(1.0, 0.0, 3.5) == 2.5
    assert crps_gaussian(0.0, 1e-12, 0.0) == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(ValueError):
        crps_gaussian(np.nan, 1.0, 0.0)
    with pytest.raises(ValueError):
        crps_gaussian(0.0, -1.0, 0.0)


@given(st.floats(-50, 50), st.floats(0, 20), st.floats(-50, 50))
@settings(max_examples=200, deadline=None)
def test_crps_nonnegative(mu, sigma, y):
    assert crps_gaussian(mu, sigma, y) >= -1e-12


def test_interval_score_hand_cases():
    assert interval_score(-1.0, 2.0, 0.5, 0.05) == 3.0
    assert interval_score(-1.0, 2.0, 2.5, 0.05) == pytest.approx(3.0 + 2 * 0.5 / 0.05)
    assert interval_score(-1.0, 2.0, -3.0, 0.1) == pytest.approx(3.0 + 2 * 2.0 / 0.1)
    with pytest.raises(ValueError):
        interval_score(1.0, 0.0, 0.5)


def test_coverage_hand_cases():
    assert coverage([0, 0, 0, 0], [1, 1, 1, 1], [0.5, 1.0, 1.5, -0.1]) == 0.5
    with pytest.raises(ValueError):
        coverage([1.0], [0.0], [0.5])


def ar1(phi, n, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_ess_ar1_within_30_percent():
    n = 100_000
    ratio = ess(ar1(0.9, n, 1)) / n
    assert ratio == pytest.approx(0.1 / 1.9, rel=0.3)


def test_ess_iid_and_constant():
    x = np.random.default_rng(2).standard_normal(10_000)
    assert 8000 <= ess(x) <= 12000
    assert ess(np.full(500, 3.0)) == 500
    assert mcse(np.full(500, 3.0)) == 0.0
    with pytest.raises(ValueError):
        ess([1.0, 2.0])


def test_mcse_iid_within_30_percent():
    x = np.random.default_rng(3).normal(0, 2.0, 20_000)
    assert mcse(x) == pytest.approx(2.0 / math.sqrt(20_000), rel=0.3)


def test_mcse_short_chain():
    with pytest.raises(ValueError, match="shorter"):
        mcse(np.zeros(99), 50)


def test_score_predictions_pooling(rng):
    truth = rng.standard_normal((20, 2))
    mean = truth + 0.1 * rng.standard_normal((20, 2))
    sd = np.full((20, 2), 0.2)
    mask = np.ones((20, 2), bool)
    mask[:5, 0] = False
    truth_nan = truth.copy()
    truth_nan[18:, 1] = np.nan
    rep = score_predictions(mean, sd, mean - 0.4, mean + 0.4, truth_nan, mask=mask)
    assert rep.n_cells == [15, 18, 33]
    sel0 = mask[:, 0]
    assert rep.get("RMSPE", "y1") == pytest.approx(rmspe(mean[sel0, 0], truth[sel0, 0]))
    pooled = np.r_[mean[sel0, 0] - truth[sel0, 0], mean[:18, 1] - truth[:18, 1]]
    assert rep.get("RMSPE") == pytest.approx(np.sqrt(np.mean(pooled ** 2)))
    rows = dict(rep.rows())
    assert rows["all"]["CRPS"] == -rep.get("CRPS") < 0


def test_score_predictions_latent_columns(rng):
    t = rng.standard_normal((10, 2))
    rep = score_predictions(t, np.ones_like(t), t - 2, t + 2, t, latent_mean=t, latent_truth=t,
                            latent_sd=np.ones_like(t), latent_lower=t - 1, latent_upper=t + 1)
    assert rep.get("MSEL") == 0.0 and rep.get("CVGL") == 1.0
    assert set(rep.values) == {"RMSPE", "CRPS", "INT", "CVG", "MSEL", "CVGL", "CRPSL", "INTL"}


def test_diagnose_chains(rng):
    d = diagnose_chains({"a": rng.standard_normal(1000), "b": ar1(0.9, 1000, 4)})
    assert d.ess[0] > d.ess[1]
    assert d.get("a")[1] == d.mcse[0]
    with pytest.raises(ValueError, match="lengths"):
        diagnose_chains({"a": np.zeros(200), "b": np.zeros(300)})

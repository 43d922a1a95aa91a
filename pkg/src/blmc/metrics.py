"""Predictive scores and MCMC chain diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

INT_ALPHA = 0.05
MCSE_BATCH = 50


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError(f"{what}: empty input")
    return a, b


def rmspe(pred, truth) -> float:
    pred, truth = _pair(pred, truth, "rmspe")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def msel(pred, truth) -> float:
    pred, truth = _pair(pred, truth, "msel")
    return float(np.mean((pred - truth) ** 2))


def crps_gaussian(mu, sigma, y):
    """CRPS of N(mu, sigma^2) at y; positively oriented (smaller is better)."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, y)))
    if np.isnan(mu).any() or np.isnan(sigma).any() or np.isnan(y).any():
        raise ValueError("crps_gaussian: NaN input")
    if (sigma < 0).any():
        raise ValueError("crps_gaussian: sigma must be nonnegative")
    pos = sigma > 0
    s = np.where(pos, sigma, 1.0)
    err = np.abs(y - mu)
    with np.errstate(over="ignore"):
        z = np.abs(y - mu) / s
    # beyond |z| = 38 the normal tail terms vanish in double precision
    zc = np.minimum(z, 38.0)
    smooth = s * (zc * (2 * norm.cdf(zc) - 1) + 2 * norm.pdf(zc) - 1 / np.sqrt(np.pi))
    smooth = np.where(z > 38.0, err - s / np.sqrt(np.pi), smooth)
    out = np.where(pos, smooth, err)
    return float(out) if out.ndim == 0 else out


def interval_score(lower, upper, y, alpha: float = INT_ALPHA):
    lower, upper, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lower, upper, y)))
    if not 0 < alpha < 1:
        raise ValueError("interval_score: alpha must lie in (0, 1)")
    if (lower > upper).any():
        raise ValueError("interval_score: lower bound exceeds upper bound")
    out = (upper - lower) + (2 / alpha) * ((lower - y) * (y < lower) + (y - upper) * (y > upper))
    return float(out) if out.ndim == 0 else out


def coverage(lower, upper, y) -> float:
    lower, upper, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lower, upper, y)))
    if (lower > upper).any():
        raise ValueError("coverage: lower bound exceeds upper bound")
    if y.size == 0:
        raise ValueError("coverage: empty input")
    return float(np.mean((y >= lower) & (y <= upper)))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    dev = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(dev, nfft)
    return np.fft.irfft(f * np.conj(f), nfft)[:n] / n


def ess(chain) -> float:
    """Effective sample size, autocorrelation sum truncated by Geyer's initial positive sequence."""
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError(f"ess: chain of length {n} is too short")
    if not np.isfinite(x).all():
        raise ValueError("ess: non-finite values in chain")
    acov = _autocov(x)
    if np.ptp(x) == 0 or acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    # pair sums Gamma_m = rho_{2m} + rho_{2m+1}; stop at first non-positive, enforce monotone
    n_pairs = (n - 1) // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    stop = neg[0] if neg.size else n_pairs
    g = np.minimum.accumulate(pairs[:stop])
    tau = -1.0 + 2.0 * g.sum()
    if tau <= 0:
        return float(n)
    return float(min(n / tau, n))


def mcse(chain, batch_size: int = MCSE_BATCH) -> float:
    """Monte Carlo standard error of the mean by nonoverlapping batch means."""
    x = np.asarray(chain, dtype=float).ravel()
    if batch_size < 1:
        raise ValueError("mcse: batch size must be positive")
    n_batch = x.size // batch_size
    if n_batch < 2:
        raise ValueError(f"mcse: chain length {x.size} is shorter than 2 x batch size {batch_size}")
    means = x[: n_batch * batch_size].reshape(n_batch, batch_size).mean(axis=1)
    return float(np.sqrt(means.var(ddof=1) / n_batch))


@dataclass
class ScoreReport:
    """Scores per response plus pooled ('all'); rows follow ``labels``."""

    labels: list[str]
    values: dict[str, list[float]] = field(default_factory=dict)
    n_cells: list[int] = field(default_factory=list)

    def get(self, metric: str, label: str = "all") -> float:
        return self.values[metric][self.labels.index(label)]

    def rows(self, negate_crps: bool = True):
        """Table rows as (label, {metric: value}); CRPS columns are negated when asked."""
        for i, lab in enumerate(self.labels):
            row = {}
            for key, vals in self.values.items():
                v = vals[i]
                row[key] = -v if negate_crps and key.startswith("CRPS") else v
            yield lab, row


def score_predictions(mean, sd, lower, upper, truth, names=None, mask=None,
                      alpha: float = INT_ALPHA, latent_mean=None, latent_truth=None,
                      latent_sd=None, latent_lower=None, latent_upper=None) -> ScoreReport:
    """Score an n x q block of predictions against held-out truth.

    ``mask`` (n x q) selects the cells that count; CRPS and INT use the
    Gaussian approximation N(mean, sd^2) while CVG uses the supplied interval.
    Latent arguments add MSEL/CVGL/CRPSL/INTL against a known latent surface.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    sd, lower, upper = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (sd, lower, upper))
    q = mean.shape[1]
    names = list(names) if names is not None else [f"y{j + 1}" for j in range(q)]
    mask = np.ones(mean.shape, bool) if mask is None else np.asarray(mask, bool)
    mask = mask & np.isfinite(truth)
    z = norm.ppf(1 - alpha / 2)
    rep = ScoreReport(labels=names + ["all"])
    cols = [mask[:, j] for j in range(q)]

    def _per(fn):
        out = []
        for j in range(q):
            c = cols[j]
            out.append(fn(np.s_[c, j]) if c.any() else float("nan"))
        out.append(fn(mask))
        return out

    rep.n_cells = [int(c.sum()) for c in cols] + [int(mask.sum())]
    rep.values["RMSPE"] = _per(lambda ix: rmspe(mean[ix], truth[ix]))
    rep.values["CRPS"] = _per(lambda ix: float(np.mean(crps_gaussian(mean[ix], sd[ix], truth[ix]))))
    rep.values["INT"] = _per(lambda ix: float(np.mean(interval_score(
        mean[ix] - z * sd[ix], mean[ix] + z * sd[ix], truth[ix], alpha))))
    rep.values["CVG"] = _per(lambda ix: coverage(lower[ix], upper[ix], truth[ix]))
    if latent_mean is not None and latent_truth is not None:
        lm = np.asarray(latent_mean, float)
        lt = np.asarray(latent_truth, float)
        full = np.ones(lm.shape, bool)

        def _lat(fn):
            return [fn(np.s_[:, j]) for j in range(q)] + [fn(full)]

        rep.values["MSEL"] = _lat(lambda ix: msel(lm[ix], lt[ix]))
        if latent_lower is not None and latent_upper is not None:
            ll = np.asarray(latent_lower, float)
            lu = np.asarray(latent_upper, float)
            rep.values["CVGL"] = _lat(lambda ix: coverage(ll[ix], lu[ix], lt[ix]))
        if latent_sd is not None:
            ls = np.asarray(latent_sd, float)
            rep.values["CRPSL"] = _lat(lambda ix: float(np.mean(crps_gaussian(lm[ix], ls[ix], lt[ix]))))
            rep.values["INTL"] = _lat(lambda ix: float(np.mean(interval_score(
                lm[ix] - z * ls[ix], lm[ix] + z * ls[ix], lt[ix], alpha))))
    return rep


@dataclass
class ChainDiagnostics:
    names: list[str]
    ess: np.ndarray
    mcse: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    length: int

    def get(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.ess[i]), float(self.mcse[i])


def diagnose_chains(chains: dict[str, np.ndarray], batch_size: int = MCSE_BATCH) -> ChainDiagnostics:
    """ESS/MCSE for each named scalar chain (all chains share one length)."""
    names = list(chains)
    arr = [np.asarray(chains[k], float).ravel() for k in names]
    lengths = {a.size for a in arr}
    if len(lengths) != 1:
        raise ValueError("chains have differing lengths")
    return ChainDiagnostics(names=names,
                            ess=np.array([ess(a) for a in arr]),
                            mcse=np.array([mcse(a, batch_size) for a in arr]),
                            mean=np.array([a.mean() for a in arr]),
                            sd=np.array([a.std(ddof=1) for a in arr]),
                            length=lengths.pop())


def parameter_chains(samples) -> dict[str, np.ndarray]:
    """Flatten beta, Lambda, upper-triangular Sigma and decays of a PosteriorSamples."""
    out: dict[str, np.ndarray] = {}
    _, p, q = samples.beta.shape
    for a in range(p):
        for b in range(q):
            out[f"beta[{a + 1},{b + 1}]"] = samples.beta[:, a, b]
    for a in range(samples.K):
        for b in range(q):
            out[f"lambda[{a + 1},{b + 1}]"] = samples.lam[:, a, b]
    for a in range(q):
        for b in range(a, q):
            if a != b and samples.sigma_mode == "diag":
                continue
            out[f"sigma[{a + 1},{b + 1}]"] = samples.sigma[:, a, b]
    for k in range(samples.K):
        out[f"phi[{k + 1}]"] = samples.psi[:, k]
    return out

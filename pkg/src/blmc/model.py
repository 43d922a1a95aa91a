"""Statistical objects: misaligned dataset, priors, configuration and chain state."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from scipy import stats

from .geometry import LocationSet
from .linalg import is_spd

logger = logging.getLogger(__name__)


class SigmaMode(str, Enum):
    FULL = "full"
    DIAG = "diag"


# --- data -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """Responses on a common location set with per-cell observation flags.

    ``Y`` holds NaN wherever ``observed`` is False.
    """

    coords: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    observed: np.ndarray
    ids: tuple = ()
    response_names: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        Y = np.array(self.Y, dtype=float, ndmin=2)
        X = np.array(self.X, dtype=float, ndmin=2)
        observed = np.asarray(self.observed, dtype=bool)
        n = coords.shape[0]
        if Y.shape[0] != n or X.shape[0] != n or observed.shape != Y.shape:
            raise ValueError(
                f"inconsistent shapes: coords {coords.shape}, Y {Y.shape}, X {X.shape}, "
                f"observed {observed.shape}")
        Y = Y.copy()
        Y[~observed] = np.nan
        ids = tuple(self.ids) if self.ids else tuple(f"s{i + 1}" for i in range(n))
        if len(ids) != n:
            raise ValueError("ids length does not match number of locations")
        rnames = tuple(self.response_names) or tuple(f"y{j + 1}" for j in range(Y.shape[1]))
        cnames = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        for name, val in (("coords", coords), ("Y", Y), ("X", X), ("observed", observed),
                          ("ids", ids), ("response_names", rnames), ("covariate_names", cnames)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_arrays(cls, coords, Y, X, observed=None, **kw) -> "Dataset":
        Y = np.array(Y, dtype=float, ndmin=2)
        if observed is None:
            observed = ~np.isnan(Y)
        return cls(coords=coords, Y=Y, X=X, observed=observed, **kw)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def locs(self) -> LocationSet:
        return LocationSet.from_coords(self.coords)

    @property
    def n_observed(self) -> np.ndarray:
        """n_i: observed count per response."""
        return self.observed.sum(axis=0)

    @property
    def incomplete_rows(self) -> np.ndarray:
        """Locations with at least one missing response."""
        return np.flatnonzero(~self.observed.all(axis=1))

    @property
    def missing_cells(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(~self.observed)

    def observed_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.observed[i])

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(coords=self.coords[rows], Y=self.Y[rows], X=self.X[rows],
                       observed=self.observed[rows], ids=tuple(np.asarray(self.ids)[rows]),
                       response_names=self.response_names, covariate_names=self.covariate_names)

    def filled(self, values: np.ndarray | None = None) -> np.ndarray:
        """Y with missing cells replaced by ``values`` (n x q) or by observed column means."""
        out = self.Y.copy()
        if values is None:
            means = np.array([np.nanmean(c) if np.any(~np.isnan(c)) else 0.0 for c in self.Y.T])
            values = np.broadcast_to(means, out.shape)
        out[~self.observed] = np.asarray(values)[~self.observed]
        return out


# --- priors ---------------------------------------------------------------

@dataclass(frozen=True)
class FlatPrior:
    pass


@dataclass(frozen=True, eq=False)
class MatrixNormalPrior:
    """MN(mean, row_cov, Sigma): mean is rows x q, row_cov rows x rows."""

    mean: np.ndarray
    row_cov: np.ndarray


@dataclass(frozen=True, eq=False)
class InverseWishartPrior:
    psi: np.ndarray
    nu: float


@dataclass(frozen=True, eq=False)
class InverseGammaPrior:
    """Independent IG(a, b_i) on each diagonal element of Sigma."""

    a: float
    b: np.ndarray


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def logpdf(self, x: float) -> float:
        if self.lo <= x <= self.hi:
            return -math.log(self.hi - self.lo)
        return -math.inf

    def median(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def problems(self) -> list[str]:
        if not (0 < self.lo < self.hi):
            return [f"uniform decay prior needs 0 < lo < hi, got ({self.lo}, {self.hi})"]
        return []


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    scale: float

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return float(stats.gamma.logpdf(x, self.shape, scale=self.scale))

    def median(self) -> float:
        return float(stats.gamma.ppf(0.5, self.shape, scale=self.scale))

    def problems(self) -> list[str]:
        if not (self.shape > 0 and self.scale > 0):
            return [f"gamma decay prior needs positive shape and scale, got "
                    f"({self.shape}, {self.scale})"]
        return []


DecayPrior = UniformPrior | GammaPrior


@dataclass(frozen=True, eq=False)
class Priors:
    beta: FlatPrior | MatrixNormalPrior
    lam: MatrixNormalPrior
    sigma: InverseWishartPrior | InverseGammaPrior
    decay: tuple

    @classmethod
    def default(cls, q: int, p: int, K: int, sigma_mode: SigmaMode | str = SigmaMode.FULL,
                decay: DecayPrior | None = None, lam_var: float = 25.0) -> "Priors":
        """Flat beta, Lambda ~ MN(0, 25 I, Sigma), IW(I, q + 1) or IG(2, 1), Unif(2.12, 212)."""
        mode = SigmaMode(sigma_mode)
        sigma = (InverseWishartPrior(np.eye(q), q + 1.0) if mode is SigmaMode.FULL
                 else InverseGammaPrior(2.0, np.ones(q)))
        decay = decay if decay is not None else UniformPrior(2.12, 212.0)
        return cls(beta=FlatPrior(),
                   lam=MatrixNormalPrior(np.zeros((K, q)), lam_var * np.eye(K)),
                   sigma=sigma, decay=tuple([decay] * K))

    @property
    def sigma_mode(self) -> SigmaMode:
        return SigmaMode.FULL if isinstance(self.sigma, InverseWishartPrior) else SigmaMode.DIAG


@dataclass(frozen=True)
class ModelConfig:
    K: int
    m: int = 10
    n_burn: int = 1000
    n_keep: int = 1000
    thin: int = 1
    sigma_mode: SigmaMode = SigmaMode.FULL
    seed: int = 0
    intercept: bool = True
    f_thin: int = 1
    threads: int = 1
    max_lsmr_iter: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sigma_mode", SigmaMode(self.sigma_mode))

    def as_dict(self) -> dict:
        return {"K": self.K, "m": self.m, "n_burn": self.n_burn, "n_keep": self.n_keep,
                "thin": self.thin, "sigma_mode": self.sigma_mode.value, "seed": self.seed,
                "intercept": self.intercept, "f_thin": self.f_thin,
                "max_lsmr_iter": self.max_lsmr_iter}


@dataclass
class McmcState:
    beta: np.ndarray       # p x q
    lam: np.ndarray        # K x q
    sigma: np.ndarray      # q x q (diagonal in diag mode)
    F: np.ndarray          # n x K
    psi: np.ndarray        # K
    y_filled: np.ndarray   # n x q, observed values plus current imputations
    iteration: int = 0

    def copy(self) -> "McmcState":
        return McmcState(self.beta.copy(), self.lam.copy(), self.sigma.copy(), self.F.copy(),
                         self.psi.copy(), self.y_filled.copy(), self.iteration)


# --- validation and initialization ----------------------------------------

def validate(dataset: Dataset, priors: Priors, config: ModelConfig) -> list[str]:
    """Every violated precondition for a fit; an empty list means the fit may proceed."""
    out: list[str] = []
    n, q, p = dataset.n, dataset.q, dataset.p
    K = config.K
    if not np.all(np.isfinite(dataset.coords)):
        out.append("coordinates contain NaN or infinite values")
    empty = np.flatnonzero(~dataset.observed.any(axis=1))
    for i in empty:
        out.append(f"location {dataset.ids[i]} (row {i}) has no observed responses")
    for j in np.flatnonzero(dataset.n_observed == 0):
        out.append(f"response {dataset.response_names[j]} is not observed anywhere")
    if np.any(~np.isfinite(dataset.Y[dataset.observed])):
        out.append("observed responses contain non-finite values")
    if not np.all(np.isfinite(dataset.X)):
        out.append("design matrix contains non-finite values")
    elif n < p or np.linalg.matrix_rank(dataset.X) < p:
        out.append(f"design matrix is not full column rank (p = {p})")
    if K < 1:
        out.append("K must be at least 1")
    if config.m < 1:
        out.append("neighbor count m must be at least 1")
    if config.n_keep < 1:
        out.append("n_keep must be at least 1")
    if config.n_burn < 0:
        out.append("n_burn must be nonnegative")
    if config.thin < 1 or config.f_thin < 1:
        out.append("thin and f_thin must be at least 1")
    if config.threads < 1:
        out.append("threads must be at least 1")

    if isinstance(priors.beta, MatrixNormalPrior):
        if np.shape(priors.beta.mean) != (p, q):
            out.append(f"beta prior mean must be {p} x {q}")
        if np.shape(priors.beta.row_cov) != (p, p) or not is_spd(priors.beta.row_cov):
            out.append(f"beta prior row covariance must be a {p} x {p} SPD matrix")
    if np.shape(priors.lam.mean) != (K, q):
        out.append(f"Lambda prior mean must be {K} x {q}")
    if np.shape(priors.lam.row_cov) != (K, K) or not is_spd(priors.lam.row_cov):
        out.append(f"Lambda prior row covariance must be a {K} x {K} SPD matrix")
    sig = priors.sigma
    if config.sigma_mode is SigmaMode.FULL and not isinstance(sig, InverseWishartPrior):
        out.append("full Sigma requires an inverse-Wishart prior")
    if config.sigma_mode is SigmaMode.DIAG and not isinstance(sig, InverseGammaPrior):
        out.append("diagonal Sigma requires inverse-gamma priors")
    if isinstance(sig, InverseWishartPrior):
        if np.shape(sig.psi) != (q, q) or not is_spd(sig.psi):
            out.append(f"IW scale must be a {q} x {q} SPD matrix")
        if not sig.nu > q:
            out.append(f"IW degrees of freedom too small: nu = {sig.nu} must exceed q = {q}")
    elif isinstance(sig, InverseGammaPrior):
        b = np.atleast_1d(sig.b)
        if not sig.a > 0:
            out.append("IG shape a must be positive")
        if b.shape != (q,) or np.any(b <= 0):
            out.append(f"IG scales b must be {q} positive values")
    if len(priors.decay) != K:
        out.append(f"expected {K} decay priors, got {len(priors.decay)}")
    for k, dp in enumerate(priors.decay):
        out.extend(f"decay {k + 1}: {msg}" for msg in dp.problems())
    return out


def warn_soft_issues(dataset: Dataset, config: ModelConfig) -> None:
    if config.K >= dataset.q:
        logger.warning("K = %d >= q = %d: no dimension reduction", config.K, dataset.q)
    if dataset.locs.has_duplicates():
        logger.warning("dataset contains duplicate coordinates")


def init_state(dataset: Dataset, priors: Priors, config: ModelConfig,
               rng: np.random.Generator) -> McmcState:
    n, q = dataset.n, dataset.q
    K = config.K
    y = dataset.filled()
    beta, *_ = np.linalg.lstsq(dataset.X, y, rcond=None)
    lam = 0.1 * rng.standard_normal((K, q))
    sig = priors.sigma
    if isinstance(sig, InverseWishartPrior):
        denom = sig.nu - q - 1
        # prior mean when it exists, else the prior mode
        sigma = np.asarray(sig.psi, dtype=float) / (denom if denom > 0 else sig.nu + q + 1)
        if config.sigma_mode is SigmaMode.DIAG:
            sigma = np.diag(np.diag(sigma))
    else:
        b = np.atleast_1d(np.asarray(sig.b, dtype=float))
        sigma = np.diag(b / (sig.a - 1) if sig.a > 1 else b / (sig.a + 1))
    psi = np.array([dp.median() for dp in priors.decay])
    return McmcState(beta=beta, lam=lam, sigma=sigma, F=np.zeros((n, K)), psi=psi, y_filled=y)

"""Synthetic data from the factor model y(s) = beta' x(s) + Lambda' f(s) + eps(s)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import LocationSet, build_neighbor_graph
from .kernels import Kernel, correlation_matrix
from .linalg import cholesky
from .model import Dataset
from .nngp import build_factor

logger = logging.getLogger(__name__)

DENSE_MAX = 5000
NNGP_GEN_M = 40


@dataclass(frozen=True, eq=False)
class GenerativeSpec:
    n: int
    beta: np.ndarray          # p x q
    lam: np.ndarray           # K x q
    sigma: np.ndarray         # q x q
    decays: tuple
    n_holdout: int = 0
    holdout: str = "locations"    # "locations": whole sites; "cells": n_holdout sites per response
    domain: tuple = ((0.0, 1.0), (0.0, 1.0))
    allow_nngp: bool = False
    name: str = "custom"

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "decays", tuple(float(d) for d in self.decays))
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def q(self) -> int:
        return self.beta.shape[1]

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.lam.shape[0]

    def problems(self) -> list[str]:
        out = []
        if self.lam.shape[1] != self.q:
            out.append(f"Lambda has {self.lam.shape[1]} columns, beta has {self.q}")
        if self.sigma.shape != (self.q, self.q):
            out.append(f"Sigma must be {self.q} x {self.q}")
        else:
            try:
                cholesky(self.sigma)
            except np.linalg.LinAlgError:
                out.append("Sigma is not SPD")
        if len(self.decays) != self.K:
            out.append(f"expected {self.K} decays, got {len(self.decays)}")
        if any(d <= 0 for d in self.decays):
            out.append("decays must be positive")
        if self.p < 1:
            out.append("need at least the intercept column")
        if self.holdout not in ("locations", "cells"):
            out.append(f"holdout must be 'locations' or 'cells', got {self.holdout!r}")
        elif self.holdout == "cells" and self.n_holdout * self.q >= self.n:
            out.append("cell holdout needs n_holdout * q < n (disjoint sites per response)")
        if not 0 <= self.n_holdout < self.n:
            out.append("holdout count must be in [0, n)")
        return out

    def with_(self, **kw) -> "GenerativeSpec":
        return replace(self, **kw)


@dataclass(eq=False)
class SimulatedData:
    """Training dataset plus held-out truths for scoring."""

    train: Dataset
    test_coords: np.ndarray
    test_X: np.ndarray
    test_Y: np.ndarray
    F_train: np.ndarray
    F_test: np.ndarray
    spec: GenerativeSpec
    meta: dict = field(default_factory=dict)
    held_cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    held_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def held_truth(self) -> np.ndarray:
        """n x q truths of the hidden training cells, NaN elsewhere."""
        out = np.full(self.train.Y.shape, np.nan)
        out[self.held_cells[:, 0], self.held_cells[:, 1]] = self.held_values
        return out

    @property
    def omega_train(self) -> np.ndarray:
        return self.F_train @ self.spec.lam

    @property
    def latent_truth(self) -> np.ndarray:
        """Intercept-centered latent process at the training locations."""
        return self.omega_train + self.spec.beta[0]


SIM1 = dict(
    n=1200,
    beta=[[1.0, -1.0], [-5.0, 2.0]],
    lam=[[1.0, 1.0], [0.0, 2.0]],
    sigma=[[0.4, 0.15], [0.15, 0.3]],
    decays=(6.0, 18.0),
    n_holdout=200,
)

SIM2_SIGMA_DIAG = (0.5, 1, 0.4, 2, 0.6, 2.5, 3.0, 0.45, 1.5, 0.5)

SIM2_DECAYS = (
    11.36, 13.43, 10.22, 6.87, 5.89, 10.09, 9.17, 2.75, 5.35, 3.43,
    4.09, 7.81, 12.52, 9.54, 5.56, 7.7, 5.44, 7.49, 9.12, 5.2,
    10.61, 5.63, 5.5, 11.65, 4.64, 13.16, 9.51, 11.77, 8.8, 13.43,
    7.89, 11.62, 6.4, 12.95, 8.48, 2.5, 12.95, 13.42, 9.59, 6.31,
    8.98, 4.57, 6.63, 11.25, 4.43, 4.94, 3.3, 9.66, 13.5, 8.7,
)

SIM2_BETA = (
    (1.0, -1.0, 1.0, -0.5, 2.0, -1.5, 0.5, 0.3, -2.0, 1.5),
    (-5.0, 2.0, 3.0, -2.0, -6.0, 4.0, 5.0, -3.0, 6.0, -4.0),
    (8.0, 6.9, -12.0, 0.0, -4.0, 7.7, -8.8, 3.3, 6.6, -5.5),
)

# Transposed loadings: row i is response i, column j is factor j (10 x 50).
SIM2_LAMBDA_T = np.array([
    # factors 1-10
    [-0.38, -0.33, 0.23, -0.38, -0.13, 0.31, 0.28, 0.0, 0.42, 0.18,
     # 11-20
     -0.15, -0.43, 0.27, 0.18, 0.38, -0.4, -0.27, -0.3, -0.38, -0.09,
     # 21-30
     0.08, 0.15, 0.11, 0.37, 0.25, 0.28, 0.13, -0.18, 0.35, 0.17,
     # 31-40
     0.42, 0.17, -0.24, 0.05, -0.0, -0.41, -0.03, -0.0, -0.22, 0.2,
     # 41-50
     0.28, 0.27, -0.45, -0.15, 0.05, 0.31, 0.16, 0.49, 0.12, -0.43],
    [-0.39, -0.13, -0.13, -0.31, -0.15, 0.42, 0.13, -0.07, 0.21, 0.1,
     0.28, -0.24, -0.32, -0.08, -0.01, -0.31, 0.2, 0.31, 0.11, -0.38,
     -0.32, -0.31, 0.24, -0.29, -0.38, -0.1, -0.19, 0.18, -0.37, -0.34,
     0.26, -0.22, 0.33, -0.06, -0.06, -0.36, -0.31, 0.14, -0.14, -0.1,
     0.14, -0.16, 0.21, -0.3, 0.36, -0.29, 0.17, 0.16, -0.35, -0.05],
    [0.01, 0.48, 0.32, 0.13, -0.46, 0.27, 0.09, 0.12, 0.25, 0.38,
     -0.38, -0.42, -0.16, -0.37, -0.22, 0.09, -0.08, -0.07, -0.33, 0.01,
     0.45, 0.19, 0.34, -0.36, 0.43, 0.44, -0.13, -0.26, -0.46, -0.08,
     0.09, 0.43, 0.04, -0.35, 0.42, 0.19, 0.33, -0.12, 0.4, -0.32,
     -0.2, -0.31, 0.11, -0.46, 0.41, 0.09, -0.24, -0.21, 0.4, -0.05],
    [0.13, 0.48, -0.47, -0.48, -0.34, -0.09, -0.28, -0.21, -0.19, 0.44,
     -0.42, -0.22, 0.44, 0.09, 0.25, 0.12, 0.1, -0.33, -0.41, 0.42,
     0.38, -0.48, -0.22, -0.14, 0.5, 0.08, 0.02, -0.07, 0.07, -0.3,
     -0.13, 0.36, 0.02, 0.02, 0.34, 0.06, -0.32, -0.47, 0.02, 0.34,
     0.44, 0.44, 0.41, -0.22, 0.36, -0.45, -0.19, 0.46, 0.49, -0.28],
    [-0.47, 0.46, 0.24, -0.45, 0.44, -0.29, -0.36, -0.46, 0.34, -0.44,
     0.42, 0.48, -0.06, 0.07, 0.43, 0.12, -0.15, 0.29, 0.1, -0.32,
     -0.49, -0.48, 0.34, 0.1, -0.01, 0.2, 0.33, 0.37, 0.1, 0.21,
     0.27, -0.35, -0.12, 0.5, 0.33, 0.33, -0.27, 0.39, 0.45, 0.27,
     -0.34, -0.5, -0.33, -0.37, 0.33, -0.31, -0.37, 0.05, -0.38, -0.14],
    [0.21, 0.12, -0.46, 0.29, 0.36, 0.17, 0.03, 0.2, -0.12, -0.23,
     -0.15, -0.03, -0.42, 0.01, 0.05, 0.33, -0.46, 0.12, 0.22, -0.44,
     0.1, 0.11, -0.33, -0.16, 0.06, 0.25, -0.37, -0.1, -0.16, -0.13,
     0.38, 0.11, 0.05, 0.38, -0.34, -0.19, -0.12, 0.39, 0.2, 0.31,
     0.33, 0.46, -0.35, -0.42, -0.01, -0.48, -0.33, -0.23, -0.07, 0.09],
    [-0.2, 0.48, 0.18, -0.1, 0.13, -0.13, -0.41, -0.04, -0.07, -0.22,
     0.28, -0.08, -0.41, 0.13, 0.03, 0.22, 0.08, 0.32, 0.02, -0.41,
     0.45, 0.02, -0.21, 0.16, 0.37, -0.2, -0.44, -0.37, 0.46, 0.25,
     0.16, 0.31, 0.02, -0.43, 0.13, 0.33, -0.34, -0.1, 0.41, -0.46,
     0.21, -0.49, -0.31, -0.04, 0.23, 0.43, 0.22, 0.23, -0.25, -0.45],
    [-0.19, 0.28, 0.47, -0.42, 0.17, -0.18, -0.03, -0.13, -0.04, 0.3,
     0.35, -0.39, 0.37, -0.47, -0.08, -0.01, 0.09, 0.06, -0.21, 0.38,
     0.34, 0.31, 0.06, -0.25, 0.37, 0.12, 0.27, -0.35, 0.09, -0.28,
     0.32, -0.2, -0.18, -0.05, 0.2, -0.17, -0.06, 0.49, -0.06, 0.3,
     -0.08, 0.35, 0.01, 0.25, -0.07, -0.29, -0.05, 0.19, -0.07, -0.14],
    [-0.04, 0.27, -0.23, -0.07, -0.09, -0.39, -0.48, -0.27, 0.19, 0.21,
     -0.38, 0.2, -0.21, 0.21, -0.11, 0.27, 0.2, 0.17, 0.31, -0.12,
     -0.2, -0.12, -0.41, 0.23, -0.23, -0.07, -0.34, 0.37, -0.43, 0.18,
     0.44, -0.05, 0.06, -0.22, -0.16, -0.43, 0.04, -0.23, -0.22, 0.11,
     -0.4, -0.38, 0.07, 0.23, 0.43, -0.05, 0.08, 0.03, 0.09, 0.02],
    [-0.03, -0.18, -0.08, -0.12, 0.35, 0.3, -0.33, 0.34, 0.38, 0.31,
     0.36, -0.09, -0.16, -0.06, 0.43, -0.04, -0.07, 0.4, -0.39, -0.06,
     0.36, 0.14, 0.47, 0.3, 0.36, -0.09, 0.1, -0.01, 0.11, 0.43,
     -0.23, -0.34, 0.45, -0.47, 0.03, -0.09, -0.47, 0.28, 0.27, -0.4,
     -0.13, -0.08, -0.18, -0.02, -0.38, -0.07, 0.41, 0.18, -0.31, 0.35],
])


def builtin_fixture(name: str) -> GenerativeSpec:
    if name == "sim1":
        return GenerativeSpec(name="sim1", **SIM1)
    if name == "sim2":
        return GenerativeSpec(n=1200, beta=SIM2_BETA, lam=SIM2_LAMBDA_T.T,
                              sigma=np.diag(SIM2_SIGMA_DIAG), decays=SIM2_DECAYS,
                              n_holdout=200, name="sim2")
    raise ValueError(f"unknown fixture {name!r} (known: sim1, sim2)")


def _draw_factors(coords: np.ndarray, decays, rng, allow_nngp: bool):
    n = coords.shape[0]
    K = len(decays)
    F = np.empty((n, K))
    if n <= DENSE_MAX:
        for k, phi in enumerate(decays):
            chol = np.linalg.cholesky(correlation_matrix(Kernel(phi), coords))
            F[:, k] = chol @ rng.standard_normal(n)
        return F, "dense"
    if not allow_nngp:
        raise ValueError(f"n = {n} exceeds the dense generation cap {DENSE_MAX}; "
                         f"set allow_nngp to generate with an m = {NNGP_GEN_M} NNGP")
    locs = LocationSet.from_coords(coords)
    graph = build_neighbor_graph(locs, NNGP_GEN_M)
    for k, phi in enumerate(decays):
        fac = build_factor(graph, locs, Kernel(phi))
        F[locs.order, k] = fac.unwhiten(rng.standard_normal(n))
    logger.warning("factors generated with an m = %d NNGP (n = %d > %d)", NNGP_GEN_M, n, DENSE_MAX)
    return F, f"nngp-m{NNGP_GEN_M}"


def generate(spec: GenerativeSpec, rng: np.random.Generator) -> SimulatedData:
    """Simulate on uniform locations and hold out part of the data.

    With ``holdout="locations"`` the test set is ``n_holdout`` whole sites.
    With ``holdout="cells"`` each response is hidden at its own ``n_holdout``
    sites (disjoint across responses, so every site keeps an observation);
    the hidden cells stay in the training set as missing values.
    """
    n, p, q = spec.n, spec.p, spec.q
    dom = np.asarray(spec.domain, dtype=float)
    coords = dom[:, 0] + (dom[:, 1] - dom[:, 0]) * rng.random((n, dom.shape[0]))
    F, method = _draw_factors(coords, spec.decays, rng, spec.allow_nngp)
    X = np.hstack([np.ones((n, 1)), rng.standard_normal((n, p - 1))])
    eps = rng.standard_normal((n, q)) @ cholesky(spec.sigma).T
    Y = X @ spec.beta + F @ spec.lam + eps
    ids = np.array([f"s{i + 1}" for i in range(n)])
    if spec.holdout == "cells":
        picks = rng.choice(n, size=spec.n_holdout * q, replace=False).reshape(q, spec.n_holdout)
        rows = np.sort(picks, axis=1).ravel()
        cols = np.repeat(np.arange(q), spec.n_holdout)
        obs = np.ones((n, q), bool)
        obs[rows, cols] = False
        ds = Dataset.from_arrays(coords, np.where(obs, Y, np.nan), X, ids=tuple(ids))
        none = np.zeros(0, np.int64)
        return SimulatedData(train=ds, test_coords=coords[none], test_X=X[none],
                             test_Y=Y[none], F_train=F, F_test=F[none], spec=spec,
                             meta={"generation": method, "test_ids": ()},
                             held_cells=np.column_stack([rows, cols]).astype(np.int64),
                             held_values=Y[rows, cols])
    test = np.sort(rng.choice(n, size=spec.n_holdout, replace=False))
    train = np.setdiff1d(np.arange(n), test)
    ds = Dataset.from_arrays(coords[train], Y[train], X[train], ids=tuple(ids[train]))
    return SimulatedData(train=ds, test_coords=coords[test], test_X=X[test], test_Y=Y[test],
                         F_train=F[train], F_test=F[test], spec=spec,
                         meta={"generation": method, "test_ids": tuple(ids[test])})


def truncate_fixture(spec: GenerativeSpec, n: int) -> GenerativeSpec:
    """Smaller version of a fixture, keeping the holdout share."""
    hold = int(round(spec.n_holdout * n / spec.n))
    return spec.with_(n=n, n_holdout=hold)


# --- misalignment ---------------------------------------------------------

@dataclass(frozen=True)
class RandomFraction:
    """Hide each listed response's cells independently with probability ``fraction``."""

    fraction: float
    responses: tuple | None = None


@dataclass(frozen=True)
class Block:
    """Hide listed responses (all when None) inside an axis-aligned rectangle."""

    lower: tuple
    upper: tuple
    responses: tuple | None = None


@dataclass(eq=False)
class Holdout:
    """Values hidden by a misalignment rule, indexed into the *input* dataset."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    dropped: np.ndarray        # input rows removed because nothing remained observed
    kept: np.ndarray           # input rows retained, in output order


def apply_misalignment(dataset: Dataset, rules, rng: np.random.Generator):
    """Hide responses per ``rules``; locations left with nothing observed are dropped.

    Returns (new dataset, Holdout).
    """
    if isinstance(rules, (RandomFraction, Block)):
        rules = [rules]
    obs = dataset.observed.copy()
    for rule in rules:
        resp = np.arange(dataset.q) if rule.responses is None else np.asarray(rule.responses)
        if isinstance(rule, RandomFraction):
            if not 0 <= rule.fraction <= 1:
                raise ValueError("fraction must lie in [0, 1]")
            hide = rng.random((dataset.n, resp.size)) < rule.fraction
            obs[:, resp] &= ~hide
        elif isinstance(rule, Block):
            lo = np.asarray(rule.lower, dtype=float)
            hi = np.asarray(rule.upper, dtype=float)
            inside = np.all((dataset.coords >= lo) & (dataset.coords <= hi), axis=1)
            obs[np.ix_(inside, resp)] = False
        else:
            raise TypeError(f"unknown misalignment rule {rule!r}")
    hidden = dataset.observed & ~obs
    rows, cols = np.nonzero(hidden)
    keep = np.flatnonzero(obs.any(axis=1))
    if keep.size == 0:
        raise ValueError("misalignment rule leaves no observed location")
    dropped = np.flatnonzero(~obs.any(axis=1))
    new = Dataset(coords=dataset.coords[keep], Y=dataset.Y[keep], X=dataset.X[keep],
                  observed=obs[keep], ids=tuple(np.asarray(dataset.ids)[keep]),
                  response_names=dataset.response_names, covariate_names=dataset.covariate_names)
    return new, Holdout(rows=rows, cols=cols, values=dataset.Y[rows, cols],
                        dropped=dropped, kept=keep)

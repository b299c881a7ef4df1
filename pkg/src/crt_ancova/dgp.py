"""Data-generating processes for the three simulation scenarios.

Every cluster has a source population of ``n`` individuals with complete data
(Y(1), Y(0), X); the trial enrolls N_i of them without replacement.

Scenario 1   X ~ N(0, 4),  Y(a) = X - mean_n(X) + delta + eps,
             N_i ~ U{4..12}, simple randomization, true effect 0.
Scenario 2   S ~ Bern(0.6), Y(a) = 2 S (a + X + mean_n(X)) + eps,
             N_i = 8, randomization stratified by S, true effect 1.2.
Scenario 3   Y(a) = X + delta + eps, otherwise as scenario 1, true effect 0.

delta ~ N(0, 1) and eps ~ N(0, 25). The Gamma variant adds gamma_i ~
Gamma(shape 25, scale 1) to both potential outcomes of every unit.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import BadSize, ConfigError
from .mmfit import TrialDataset
from .randomize import simple_assign, stratified_assign, stream

TRUE_EFFECT = {1: 0.0, 2: 1.2, 3: 0.0}
SIZE_RANGE = {1: (4, 12), 2: (8, 8), 3: (4, 12)}
DEFAULT_SUPERPOP_N = {1: 12, 2: 8, 3: 12}
DEFAULT_SCHEME = {1: "simple", 2: "stratified", 3: "simple"}
X_SD = 2.0
EPS_SD = 5.0
DELTA_SD = 1.0
GAMMA_SHAPE = 25.0
S_PROB = 0.6


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation settings.

    ``superpop_n=None`` picks the per-scenario default (12, 8, 12).
    ``scheme=None`` uses the scenario's own randomization (stratified for 2).
    ``force_stratum`` pins every S_i (scenario 2 diagnostics).
    """

    scenario: int
    m: int
    superpop_n: int = None
    pi: float = 0.5
    add_gamma: bool = False
    master_seed: int = 0
    scheme: str = None
    force_stratum: int = None

    def __post_init__(self):
        if self.scenario not in TRUE_EFFECT:
            raise ConfigError(f"scenario must be 1, 2 or 3, got {self.scenario!r}")
        if self.m < 1:
            raise ConfigError("m must be positive")
        if not 0 < self.pi < 1:
            raise ConfigError(f"pi must lie in (0, 1), got {self.pi!r}")
        if self.scheme not in (None, "simple", "stratified"):
            raise ConfigError(f"unknown randomization scheme {self.scheme!r}")
        if self.n < SIZE_RANGE[self.scenario][1]:
            raise ConfigError(
                f"superpop_n={self.n} is below the largest cluster size "
                f"{SIZE_RANGE[self.scenario][1]} for scenario {self.scenario}"
            )

    @property
    def n(self):
        return DEFAULT_SUPERPOP_N[self.scenario] if self.superpop_n is None else self.superpop_n

    @property
    def true_delta(self):
        return TRUE_EFFECT[self.scenario]

    @property
    def assignment_scheme(self):
        return self.scheme or DEFAULT_SCHEME[self.scenario]

    @property
    def covariate_names(self):
        return ("X", "S") if self.scenario == 2 else ("X",)


@dataclass(frozen=True)
class CompleteClusterDraw:
    """Complete (partly unobserved) data for a batch of clusters; arrays are (m, n)."""

    y1: np.ndarray
    y0: np.ndarray
    x: np.ndarray
    delta: np.ndarray
    eps: np.ndarray
    gamma: np.ndarray
    stratum: np.ndarray


def _rng(config, rep_index, purpose):
    return stream(config.master_seed, config.scenario, rep_index, purpose)


def draw_complete(config, rep_index, m=None):
    """Potential outcomes and covariates for ``m`` clusters (default config.m)."""
    m = config.m if m is None else m
    n = config.n
    g = _rng(config, rep_index, "outcomes")
    x = g.normal(0.0, X_SD, size=(m, n))
    eps = g.normal(0.0, EPS_SD, size=(m, n))
    delta = g.normal(0.0, DELTA_SD, size=m)
    xbar = x.mean(axis=1, keepdims=True)
    if config.scenario == 2:
        if config.force_stratum is None:
            s = (_rng(config, rep_index, "strata").random(m) < S_PROB).astype(float)
        else:
            s = np.full(m, float(config.force_stratum))
        base = 2 * s[:, None] * (x + xbar) + eps
        y0 = base
        y1 = base + 2 * s[:, None]
        delta = np.zeros(m)
    else:
        s = np.zeros(m)
        if config.scenario == 1:
            y0 = x - xbar + delta[:, None] + eps
        else:
            y0 = x + delta[:, None] + eps
        y1 = y0
    if config.add_gamma:
        gamma = _rng(config, rep_index, "gamma").gamma(GAMMA_SHAPE, 1.0, size=m)
        y0 = y0 + gamma[:, None]
        y1 = y1 + gamma[:, None]
    else:
        gamma = np.zeros(m)
    return CompleteClusterDraw(y1=y1, y0=y0, x=x, delta=delta, eps=eps, gamma=gamma, stratum=s)


def enroll_many(n, sizes, rng):
    """Uniform random subsets for several clusters at once.

    Row i of the returned (m, max(sizes)) index array holds the first
    ``sizes[i]`` positions of a partial Fisher-Yates shuffle of ``range(n)``;
    entries past ``sizes[i]`` are meaningless.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    if np.any(sizes < 1) or np.any(sizes > n):
        raise BadSize(f"cannot enroll sizes {sizes.min()}..{sizes.max()} out of {n} individuals")
    m = sizes.size
    depth = int(sizes.max())
    u = rng.random((m, depth))
    idx = np.tile(np.arange(n), (m, 1))
    rows = np.arange(m)
    for j in range(depth):
        r = j + (u[:, j] * (n - j)).astype(np.int64)
        tmp = idx[rows, j].copy()
        idx[rows, j] = idx[rows, r]
        idx[rows, r] = tmp
    return idx[:, :depth]


def enroll(n, size, rng):
    """Uniform random ``size``-subset of ``range(n)`` (partial Fisher-Yates, draw order)."""
    if not 1 <= size <= n:
        raise BadSize(f"cannot enroll {size} of {n} individuals")
    return enroll_many(n, [size], rng)[0]


def draw_sizes(config, rep_index, m=None):
    m = config.m if m is None else m
    lo, hi = SIZE_RANGE[config.scenario]
    if lo == hi:
        return np.full(m, lo, dtype=np.int64)
    return _rng(config, rep_index, "sizes").integers(lo, hi + 1, size=m)


def assign(config, rep_index, strata):
    arng = _rng(config, rep_index, "assign")
    if config.assignment_scheme == "stratified":
        return stratified_assign(strata, config.pi, arng)
    return simple_assign(config.m, config.pi, arng)


def gen_trial(config, rep_index):
    """Observed trial for replication ``rep_index``; returns (dataset, true effect)."""
    full = draw_complete(config, rep_index)
    sizes = draw_sizes(config, rep_index)
    a = assign(config, rep_index, full.stratum)
    idx = enroll_many(config.n, sizes, _rng(config, rep_index, "enroll"))
    keep = np.arange(idx.shape[1])[None, :] < sizes[:, None]

    y_full = np.where(a[:, None] == 1, full.y1, full.y0)
    y = np.take_along_axis(y_full, idx, axis=1)[keep]
    x = np.take_along_axis(full.x, idx, axis=1)[keep]
    if config.scenario == 2:
        cov = np.column_stack([x, np.repeat(full.stratum, sizes)])
        strata = tuple(int(s) for s in full.stratum)
    else:
        cov = x[:, None]
        strata = None
    data = TrialDataset.from_arrays(
        y, cov, sizes, a, strata=strata, covariate_names=config.covariate_names
    )
    return data, config.true_delta


def analytic_icc(config):
    """Closed-form ICC of control-arm outcomes; see :func:`icc_estimate`."""
    n = config.n
    vx = X_SD**2
    ve = EPS_SD**2
    vg = GAMMA_SHAPE if config.add_gamma else 0.0
    if config.scenario == 1:
        cov = DELTA_SD**2 - vx / n + vg
        var = vx * (1 - 1 / n) + DELTA_SD**2 + ve + vg
    elif config.scenario == 3:
        cov = DELTA_SD**2 + vg
        var = vx + DELTA_SD**2 + ve + vg
    else:
        es2 = S_PROB  # E[S^2] for a Bernoulli stratum
        cov = 4 * es2 * 3 * vx / n + vg
        var = 4 * es2 * vx * (1 + 3 / n) + ve + vg
    return cov / var


def icc_estimate(config, n_clusters_mc, arm=0, rep_index=0):
    """Monte Carlo intracluster correlation of potential outcomes.

    ``arm=0`` (default) uses control potential outcomes Y(0); ``arm=1`` uses
    Y(1); ``arm="marginal"`` draws each cluster's arm from Bernoulli(pi) and uses
    the realized outcome. Pairs are taken among all ``n`` source individuals.
    Returns (icc, standard_error).
    """
    if n_clusters_mc < 2:
        raise ValueError("need at least two clusters")
    full = draw_complete(config, rep_index, m=n_clusters_mc)
    if arm == "marginal":
        a = _rng(config, rep_index, "icc-arm").random(n_clusters_mc) < config.pi
        y = np.where(a[:, None], full.y1, full.y0)
    elif arm in (0, 1):
        y = full.y1 if arm == 1 else full.y0
    else:
        raise ValueError("arm must be 0, 1 or 'marginal'")
    n = y.shape[1]
    d = y - y.mean()
    rowsum = d.sum(axis=1)
    sq = (d * d).sum(axis=1)
    c = (rowsum**2 - sq) / (n * (n - 1))  # mean pairwise cross product per cluster
    v = sq / n
    icc = c.mean() / v.mean()
    lin = (c - icc * v) / v.mean()
    se = float(lin.std(ddof=1) / math.sqrt(n_clusters_mc))
    return float(icc), se

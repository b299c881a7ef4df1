"""Maximum likelihood and REML fitting of the random-intercept ANCOVA model.

The working model for cluster i is

    Y_i = Q_i beta + delta_i 1 + eps_i,    Q_i = (1, A_i 1, X_i),

with delta_i ~ N(0, tau2) and eps_ij ~ N(0, sigma2). The treatment
coefficient beta[1] estimates the average treatment effect.

Fitting profiles beta out by generalized least squares and searches the two
variance components with Nelder-Mead over (log sigma2, logit rho), where
rho = tau2 / (tau2 + sigma2). Because the compound-symmetric weight only
depends on the cluster size, per-cluster cross products are collapsed into
per-size sums once; a likelihood evaluation then costs
O(k^2 * #distinct sizes) regardless of the number of clusters.
"""

from dataclasses import dataclass, field
from functools import cached_property
import hashlib
import math
import warnings

import numpy as np

from . import _kernels
from .csalg import CompoundSymmetry
from .errors import SingularDesign

MODES = ("ML", "REML")


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterRecord:
    """Observed data for one cluster.

    Attributes:
        cluster_id: opaque identifier.
        treatment: arm indicator, 0 or 1.
        outcomes: (N,) observed outcomes.
        covariates: (N, p) baseline covariates; p may be 0.
        stratum: optional randomization stratum label.
    """

    cluster_id: object
    treatment: int
    outcomes: np.ndarray
    covariates: np.ndarray
    stratum: object = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float).reshape(-1)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(y.size, -1) if x.size else np.empty((y.size, 0))
        if y.size < 1:
            raise ValueError(f"cluster {self.cluster_id!r} has no observations")
        if x.shape[0] != y.size:
            raise ValueError(
                f"cluster {self.cluster_id!r}: {x.shape[0]} covariate rows for {y.size} outcomes"
            )
        if self.treatment not in (0, 1):
            raise ValueError(f"cluster {self.cluster_id!r}: treatment must be 0 or 1")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "treatment", int(self.treatment))

    @property
    def size(self):
        return self.outcomes.size

    def __eq__(self, other):
        if not isinstance(other, ClusterRecord):
            return NotImplemented
        return (
            self.cluster_id == other.cluster_id
            and self.treatment == other.treatment
            and self.stratum == other.stratum
            and np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.covariates, other.covariates)
        )


class TrialDataset:
    """Ordered collection of clusters sharing one covariate set.

    Data are held as stacked arrays (one row per individual, clusters
    contiguous); :attr:`clusters` exposes them as :class:`ClusterRecord` views.
    Instances are treated as immutable.
    """

    def __init__(self, clusters, covariate_names=()):
        clusters = tuple(clusters)
        if not clusters:
            raise ValueError("a trial needs at least one cluster")
        p = clusters[0].covariates.shape[1]
        if any(c.covariates.shape[1] != p for c in clusters):
            raise ValueError("all clusters must have the same number of covariates")
        self._init(
            y=np.concatenate([c.outcomes for c in clusters]),
            x=np.concatenate([c.covariates for c in clusters], axis=0),
            sizes=np.array([c.size for c in clusters], dtype=np.int64),
            treatment=np.array([c.treatment for c in clusters], dtype=np.int64),
            cluster_ids=tuple(c.cluster_id for c in clusters),
            strata=tuple(c.stratum for c in clusters),
            covariate_names=covariate_names,
        )
        self.__dict__["clusters"] = clusters

    @classmethod
    def from_arrays(cls, y, x, sizes, treatment, cluster_ids=None, strata=None, covariate_names=()):
        """Build from stacked arrays without creating per-cluster records."""
        self = cls.__new__(cls)
        sizes = np.asarray(sizes, dtype=np.int64)
        treatment = np.asarray(treatment, dtype=np.int64)
        m = sizes.size
        if m == 0:
            raise ValueError("a trial needs at least one cluster")
        if np.any(sizes < 1):
            raise ValueError("every cluster needs at least one observation")
        if not np.all((treatment == 0) | (treatment == 1)) or treatment.size != m:
            raise ValueError("treatment must hold one 0/1 value per cluster")
        y = np.asarray(y, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(y.size, -1) if x.size else np.empty((y.size, 0))
        if y.size != sizes.sum() or x.shape[0] != y.size:
            raise ValueError("stacked arrays do not match the cluster sizes")
        self._init(
            y=y, x=x, sizes=sizes, treatment=treatment,
            cluster_ids=tuple(range(m)) if cluster_ids is None else tuple(cluster_ids),
            strata=(None,) * m if strata is None else tuple(strata),
            covariate_names=covariate_names,
        )
        return self

    def _init(self, y, x, sizes, treatment, cluster_ids, strata, covariate_names):
        names = tuple(covariate_names)
        p = x.shape[1]
        if names and len(names) != p:
            raise ValueError(f"{len(names)} covariate names for {p} covariate columns")
        if not names:
            names = tuple(f"x{j + 1}" for j in range(p))
        for arr in (y, x, sizes, treatment):
            arr.setflags(write=False)
        self.y = y
        self.x = x
        self.sizes = sizes
        self.treatment = treatment
        self.cluster_ids = cluster_ids
        self.strata = strata
        self.covariate_names = names

    def __repr__(self):
        return f"TrialDataset(m={self.m}, n_obs={self.y.size}, covariates={self.covariate_names})"

    def __len__(self):
        return self.m

    def __eq__(self, other):
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (
            self.covariate_names == other.covariate_names
            and self.cluster_ids == other.cluster_ids
            and self.strata == other.strata
            and np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
        )

    __hash__ = None

    @property
    def m(self):
        return self.sizes.size

    @property
    def p(self):
        return self.x.shape[1]

    @cached_property
    def offsets(self):
        return np.concatenate(([0], np.cumsum(self.sizes)[:-1]))

    @cached_property
    def clusters(self):
        ys = np.split(self.y, self.offsets[1:])
        xs = np.split(self.x, self.offsets[1:])
        return tuple(
            ClusterRecord(cid, int(a), yi, xi, s)
            for cid, a, yi, xi, s in zip(self.cluster_ids, self.treatment, ys, xs, self.strata)
        )

    @cached_property
    def design(self):
        """Stacked design matrix (1, A, X), one row per individual."""
        a = np.repeat(self.treatment.astype(float), self.sizes)
        return np.column_stack([np.ones(a.size), a, self.x])

    @cached_property
    def moments(self):
        return _Moments.from_dataset(self)

    def _replace(self, y=None, x=None, covariate_names=None):
        return TrialDataset.from_arrays(
            self.y if y is None else y,
            self.x if x is None else x,
            self.sizes, self.treatment, self.cluster_ids, self.strata,
            self.covariate_names if covariate_names is None else covariate_names,
        )

    def drop_covariates(self):
        """Copy with every covariate column removed."""
        return self._replace(x=np.empty((self.y.size, 0)), covariate_names=())

    def select_covariates(self, names):
        idx = [self.covariate_names.index(n) for n in names]
        return self._replace(x=self.x[:, idx], covariate_names=tuple(names))

    def with_outcomes(self, y):
        return self._replace(y=np.asarray(y, dtype=float))

    def with_covariates(self, x, names=None):
        x = np.asarray(x, dtype=float)
        if names is None:
            names = self.covariate_names if x.shape[-1] == self.p else ()
        return self._replace(x=x, covariate_names=names)

    def reorder(self, order):
        """Copy with clusters permuted by ``order``."""
        cl = self.clusters
        return TrialDataset([cl[i] for i in order], self.covariate_names)

    def digest(self):
        """Content hash; equal data give equal digests."""
        h = hashlib.sha256()
        for arr in (self.y, self.x, self.sizes, self.treatment):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.cluster_ids, self.strata, self.covariate_names)).encode())
        return h.hexdigest()


def build_design(record):
    """Design matrix (1, A 1, X) of shape (N, p + 2) for one cluster."""
    n = record.size
    return np.column_stack([np.ones(n), np.full(n, float(record.treatment)), record.covariates])


# ---------------------------------------------------------------------------
# Sufficient statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Moments:
    """Cross products of the stacked data, per cluster and collapsed by size.

    Outcomes and covariate columns are centered at their overall means before
    the products are formed, which keeps the likelihood free of cancellation
    when the data carry large offsets. ``raw_beta`` and ``raw_gram`` map
    results back to the original design (1, A, X).
    """

    n_total: int
    k: int
    QQ: np.ndarray  # (k, k)  sum_i Q_i'Q_i
    QY: np.ndarray  # (k,)    sum_i Q_i'Y_i
    YY: float
    s: np.ndarray  # (m, k)  column sums Q_i'1
    t: np.ndarray  # (m,)    outcome sums 1'Y_i
    sizes: np.ndarray  # (m,)
    g_sizes: np.ndarray  # (G,)  distinct sizes
    g_count: np.ndarray  # (G,)
    g_SS: np.ndarray  # (G, k, k)  sum over a size group of s_i s_i'
    g_St: np.ndarray  # (G, k)
    g_tt: np.ndarray  # (G,)
    rank_ok: bool
    x_center: np.ndarray  # (p,)
    y_center: float

    @classmethod
    def from_dataset(cls, data):
        x_center = data.x.mean(axis=0) if data.p else np.empty(0)
        y_center = float(data.y.mean())
        Q = data.design.copy()
        Q[:, 2:] -= x_center
        y = data.y - y_center
        s = np.add.reduceat(Q, data.offsets, axis=0)
        t = np.add.reduceat(y, data.offsets)
        g_sizes, inverse, g_count = np.unique(data.sizes, return_inverse=True, return_counts=True)
        G, k = g_sizes.size, Q.shape[1]
        g_SS = np.zeros((G, k, k))
        g_St = np.zeros((G, k))
        g_tt = np.zeros(G)
        np.add.at(g_SS, inverse, s[:, :, None] * s[:, None, :])
        np.add.at(g_St, inverse, s * t[:, None])
        np.add.at(g_tt, inverse, t * t)
        QQ = Q.T @ Q
        return cls(
            n_total=int(y.size), k=k, QQ=QQ, QY=Q.T @ y, YY=float(y @ y), s=s, t=t,
            sizes=data.sizes, g_sizes=g_sizes.astype(float), g_count=g_count.astype(float),
            g_SS=g_SS, g_St=g_St, g_tt=g_tt, rank_ok=_full_rank(QQ),
            x_center=x_center, y_center=y_center,
        )

    def kernel_args(self):
        return (float(self.n_total), self.QQ, self.QY, self.YY, self.g_sizes, self.g_count,
                self.g_SS, self.g_St, self.g_tt)

    def raw_beta(self, beta_c):
        """Coefficients on (1, A, X) from those on the centered data."""
        beta = np.array(beta_c, dtype=float)
        beta[0] += self.y_center - self.x_center @ beta[2:]
        return beta

    def raw_gram(self, gram_c):
        """M' G M with Q = Q_c M, M = I + e_0 (0, 0, x_center)'."""
        c = np.r_[0.0, 0.0, self.x_center]
        g = gram_c + np.outer(c, gram_c[0]) + np.outer(gram_c[0], c) + gram_c[0, 0] * np.outer(c, c)
        return g


def _full_rank(gram, rcond=1e-12):
    d = np.sqrt(np.diag(gram))
    if np.any(d == 0):
        return False
    ev = np.linalg.eigvalsh(gram / np.outer(d, d))
    return ev[0] > rcond * ev[-1]


def _require_rank(mom):
    if not mom.rank_ok:
        raise SingularDesign(
            "design (1, A, X) is rank deficient: check for constant covariates, "
            "collinear columns, or a trial with only one arm"
        )


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _evaluate(mom, sigma2, tau2, mode="ML"):
    beta = np.zeros(mom.k)
    ll = _kernels.profile_objective(
        *mom.kernel_args(), float(sigma2), float(tau2), mode == "REML", beta
    )
    if not np.isfinite(ll):
        raise SingularDesign("weighted Gram matrix is not positive definite")
    return ll, mom.raw_beta(beta)


def weighted_gram(data, cs):
    """sum_i Q_i' Sigma_i^{-1} Q_i at the given variance components."""
    mom = data.moments
    w = cs.tau2 / (cs.sigma2 + mom.g_sizes * cs.tau2)
    return mom.raw_gram((mom.QQ - np.tensordot(w, mom.g_SS, axes=1)) / cs.sigma2)


def gls_beta(data, cs):
    """Generalized least squares coefficients at fixed variance components.

    Solves sum_i Q_i' Sigma_i^{-1} (Y_i - Q_i beta) = 0; returns
    (beta_0, beta_A, beta_X...).
    """
    mom = data.moments
    _require_rank(mom)
    return _evaluate(mom, cs.sigma2, cs.tau2)[1]


def profile_loglik(data, cs, mode="ML"):
    """Gaussian log-likelihood at ``cs`` with beta at its GLS solution.

    REML additionally subtracts 1/2 log det(sum_i Q_i' Sigma_i^{-1} Q_i). The
    additive constant is -(sum_i N_i / 2) log(2 pi) in both modes.
    """
    _check_mode(mode)
    mom = data.moments
    _require_rank(mom)
    return _evaluate(mom, cs.sigma2, cs.tau2, mode)[0]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``xatol`` bounds the simplex diameter in (log sigma2, logit rho) space and
    ``fatol`` the vertex spread of the negative objective divided by the number
    of observations. Both must hold for convergence.
    """

    max_iter: int = 500
    xatol: float = 1e-8
    fatol: float = 1e-10
    sigma2_floor: float = 1e-10  # times the sample variance of Y
    logit_bounds: tuple = (-30.0, 30.0)
    init_step: tuple = (0.5, 1.0)


@dataclass(frozen=True)
class MixedFit:
    beta: np.ndarray
    sigma2_hat: float
    tau2_hat: float
    loglik: float
    estimation_mode: str
    converged: bool
    n_params_p: int
    n_iter: int = 0
    on_boundary: bool = False
    notes: tuple = field(default=())

    @property
    def delta_hat(self):
        return float(self.beta[1])

    @property
    def cs(self):
        return CompoundSymmetry(self.sigma2_hat, self.tau2_hat)


def _moment_start(mom):
    """ANOVA-style start from pooled OLS residuals: (sigma2_0, tau2_0)."""
    beta = np.linalg.solve(mom.QQ, mom.QY)
    rss = mom.YY - 2 * beta @ mom.QY + beta @ mom.QQ @ beta
    rsum = mom.t - mom.s @ beta
    sizes = mom.sizes.astype(float)
    within = rss - np.sum(rsum**2 / sizes)
    df_within = mom.n_total - sizes.size
    if df_within > 0 and within > 0:
        sigma2 = within / df_within
    else:
        sigma2 = max(rss / max(mom.n_total - mom.k, 1), 0.0)
    between = float(np.var(rsum / sizes, ddof=1)) if sizes.size > 1 else 0.0
    hmean = sizes.size / np.sum(1.0 / sizes)
    return sigma2, max(between - sigma2 / hmean, 0.0)


def _boundary_fit(mom, mode, floor):
    """Exact maximizer along tau2 = 0 (pooled OLS with closed-form sigma2)."""
    beta = np.linalg.solve(mom.QQ, mom.QY)
    rss = max(mom.YY - 2 * beta @ mom.QY + beta @ mom.QQ @ beta, 0.0)
    denom = mom.n_total if mode == "ML" else mom.n_total - mom.k
    sigma2 = max(rss / max(denom, 1), floor)
    return sigma2, _evaluate(mom, sigma2, 0.0, mode)[0]


def _score(mom, sigma2, tau2, mode):
    g = np.zeros(2)
    ok = _kernels.profile_score(*mom.kernel_args(), float(sigma2), float(tau2), mode == "REML", g)
    return g if ok else None


def _newton_polish(mom, mode, sigma2, tau2, ll, max_steps=4):
    """Refine an interior simplex solution by Newton steps on the score.

    The simplex search locates the optimum only to about the square root of
    the objective's rounding noise; solving the score equations recovers full
    precision. The Hessian is a central difference of the analytic score. A
    step is kept only if it stays interior and does not lower the objective.
    """
    theta = np.array([sigma2, tau2])
    for _ in range(max_steps):
        g = _score(mom, *theta, mode)
        if g is None:
            break
        h = 1e-5 * np.array([theta[0], max(theta[1], 1e-3 * theta[0])])
        H = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h[j]
            gp, gm = _score(mom, *(theta + e), mode), _score(mom, *(theta - e), mode)
            if gp is None or gm is None:
                return theta[0], theta[1], ll
            H[:, j] = (gp - gm) / (2 * h[j])
        H = 0.5 * (H + H.T)
        if not (H[0, 0] < 0 and np.linalg.det(H) > 0):
            break
        step = -np.linalg.solve(H, g)
        new = theta + step
        if new[0] <= 0 or new[1] <= 0:
            break
        try:
            new_ll = _evaluate(mom, new[0], new[1], mode)[0]
        except SingularDesign:
            break
        if new_ll < ll - 1e-12 * abs(ll):
            break
        theta, ll = new, max(new_ll, ll)
        if np.all(np.abs(step) <= 1e-13 * theta):
            break
    return float(theta[0]), float(theta[1]), ll


def fit(data, mode="ML", config=None):
    """Fit the random-intercept ANCOVA by ML or REML.

    Non-convergence is reported through ``converged=False`` with the best
    iterate; it is never raised.
    """
    _check_mode(mode)
    config = config or FitConfig()
    mom = data.moments
    _require_rank(mom)

    yvar = float(np.var(data.y)) if data.y.size > 1 else 0.0
    floor = config.sigma2_floor * (yvar if yvar > 0 else 1.0)
    notes = []
    if np.any(mom.sizes < 2):
        notes.append("singleton clusters present; they carry no within-cluster information")

    s0, t0 = _moment_start(mom)
    s0 = max(s0, floor, 1e-8 * max(yvar, 1.0))
    rho0 = min(max(t0 / (t0 + s0), 0.01), 0.99)
    x0 = np.array([math.log(s0), math.log(rho0 / (1 - rho0))])
    lo = np.array([math.log(floor), config.logit_bounds[0]])
    hi = np.array([math.inf, config.logit_bounds[1]])
    x, fx, n_iter, converged = _kernels.nelder_mead_fit(
        x0, np.asarray(config.init_step, dtype=float), lo, hi,
        config.xatol, config.fatol, config.max_iter, *mom.kernel_args(), mode == "REML",
    )
    sigma2 = math.exp(x[0])
    tau2 = sigma2 * math.exp(x[1])
    ll = -fx * mom.n_total
    if converged and tau2 > 0:
        sigma2, tau2, ll = _newton_polish(mom, mode, sigma2, tau2, ll)

    b_sigma2, b_ll = _boundary_fit(mom, mode, floor)
    on_boundary = b_ll >= ll
    if on_boundary:
        sigma2, tau2, ll = b_sigma2, 0.0, b_ll
    if not converged:
        warnings.warn(f"{mode} fit did not converge in {config.max_iter} iterations", RuntimeWarning)

    ll, beta = _evaluate(mom, sigma2, tau2, mode)
    return MixedFit(
        beta=beta, sigma2_hat=sigma2, tau2_hat=tau2, loglik=ll, estimation_mode=mode,
        converged=bool(converged), n_params_p=data.p, n_iter=int(n_iter),
        on_boundary=bool(on_boundary), notes=tuple(notes),
    )


def fit_unadjusted(data, mode="ML", config=None):
    """:func:`fit` with every covariate dropped (design (1, A))."""
    return fit(data.drop_covariates(), mode, config)


def estimating_function(data, beta, cs):
    """Per-cluster ML score contributions, shape (m, p + 4).

    Columns: Q_i' V_i r_i (p + 2 entries), -tr(V_i) + r_i' V_i^2 r_i, and
    -1'V_i 1 + (1'V_i r_i)^2, with V_i = Sigma_i^{-1} and r_i = Y_i - Q_i beta.
    Summed over clusters these vanish at an interior ML solution.
    """
    Q = data.design
    r = data.y - Q @ beta
    sizes = data.sizes.astype(float)
    w = cs.tau2 / (cs.sigma2 + sizes * cs.tau2)
    rsum = np.add.reduceat(r, data.offsets)
    vr = (r - np.repeat(w * rsum, data.sizes)) / cs.sigma2
    qvr = np.add.reduceat(Q * vr[:, None], data.offsets, axis=0)
    tr_v = sizes * (1 - w) / cs.sigma2
    rv2r = np.add.reduceat(vr * vr, data.offsets)
    lam = 1.0 / (cs.sigma2 + sizes * cs.tau2)
    return np.column_stack([qvr, -tr_v + rv2r, -sizes * lam + (lam * rsum) ** 2])

"""Cluster-level ANCOVA: least squares on cluster means.

Regresses Ybar_i on (1, A_i, Xbar_i) by ordinary least squares; the
treatment coefficient is the estimate. Also provides the diagnostic that
compares cluster-level and individual-level covariate projections, whose
difference is zero exactly when both ANCOVA estimators share the same
asymptotic variance under constant cluster sizes.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import DegreesOfFreedom, SingularCovariance, SingularDesign
from .variance import EstimateReport

VARIANCE_MODES = ("classical", "robust")


@dataclass(frozen=True)
class ClusterMeansTable:
    ybar: np.ndarray  # (m,)
    treatment: np.ndarray  # (m,)
    xbar: np.ndarray  # (m, p)
    n: np.ndarray  # (m,)

    def __len__(self):
        return self.ybar.size


def aggregate(data):
    """Cluster means of outcomes and covariates, in dataset order."""
    sizes = data.sizes.astype(float)
    if np.all(data.sizes == data.sizes[0]):
        k = int(data.sizes[0])
        ybar = data.y.reshape(-1, k).sum(axis=1) / k
        xbar = data.x.reshape(data.m, k, data.p).sum(axis=1) / k
    else:
        ybar = np.add.reduceat(data.y, data.offsets) / sizes
        if data.p:
            xbar = np.add.reduceat(data.x, data.offsets, axis=0) / sizes[:, None]
        else:
            xbar = np.empty((data.m, 0))
    return ClusterMeansTable(ybar=ybar, treatment=data.treatment.astype(float), xbar=xbar,
                             n=data.sizes.copy())


@dataclass(frozen=True)
class ClusterAncovaFit:
    coef: np.ndarray  # (alpha_0, alpha_A, alpha_Xbar...)
    cov: np.ndarray
    report: EstimateReport
    rss: float
    variance_mode: str

    @property
    def delta_hat(self):
        return float(self.coef[1])


def fit_cluster_ancova(data, variance_mode="classical", level=0.95, label="cluster-level ANCOVA"):
    """OLS of cluster means on (1, A, Xbar).

    ``classical``: s^2 (Z'Z)^{-1} with s^2 = RSS / (m - p - 2).
    ``robust``: HC0, (Z'Z)^{-1} Z' diag(e^2) Z (Z'Z)^{-1}.
    """
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
    table = aggregate(data)
    m, p = data.m, data.p
    if m <= p + 2:
        raise DegreesOfFreedom(f"need more than p + 2 = {p + 2} clusters, got {m}")
    Z = np.column_stack([np.ones(m), table.treatment, table.xbar])
    ztz = Z.T @ Z
    d = np.sqrt(np.diag(ztz))
    if np.any(d == 0):
        raise SingularDesign("cluster-level design has an all-zero column")
    ev = np.linalg.eigvalsh(ztz / np.outer(d, d))
    if ev[0] <= 1e-12 * ev[-1]:
        raise SingularDesign("cluster-level design (1, A, Xbar) is rank deficient")
    ztz_inv = np.linalg.inv(ztz)
    coef = ztz_inv @ (Z.T @ table.ybar)
    e = table.ybar - Z @ coef
    rss = float(e @ e)
    if variance_mode == "classical":
        cov = rss / (m - p - 2) * ztz_inv
        method = "ClusterOLS"
    else:
        cov = ztz_inv @ ((Z * (e * e)[:, None]).T @ Z) @ ztz_inv
        method = "ClusterRobust"
    cov = 0.5 * (cov + cov.T)
    se = math.sqrt(max(cov[1, 1], 0.0))
    report = EstimateReport.build(coef[1], se, level, method, label)
    return ClusterAncovaFit(coef=coef, cov=cov, report=report, rss=rss, variance_mode=variance_mode)


def _projection(x, y):
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    sxx = xc.T @ xc
    if np.linalg.matrix_rank(sxx) < sxx.shape[0]:
        raise SingularCovariance("empirical covariate covariance is singular")
    return np.linalg.solve(sxx, xc.T @ yc)


def thm2_gap(data):
    """Var(Xbar)^{-1} Cov(Xbar, Ybar) minus Var(X)^{-1} Cov(X, Y).

    The first term uses cluster means, the second pools all individuals.
    Returns a length-p vector.
    """
    if data.p == 0:
        return np.empty(0)
    if data.m < data.p + 2:
        raise DegreesOfFreedom(f"need at least p + 2 = {data.p + 2} clusters")
    table = aggregate(data)
    return _projection(table.xbar, table.ybar) - _projection(data.x, data.y)

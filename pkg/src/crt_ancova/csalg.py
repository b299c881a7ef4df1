"""Closed-form algebra for the compound-symmetric covariance sigma2*I + tau2*11'.

Everything here is O(N) in the cluster size; no N x N matrix is formed.
The inverse follows from the rank-one (Woodbury) update

    Sigma^{-1} = (I - w 11') / sigma2,   w = tau2 / (sigma2 + N tau2),

and the log-determinant from the eigenvalues (sigma2 + N tau2 once,
sigma2 with multiplicity N - 1).
"""

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class CompoundSymmetry:
    """Variance components of a random-intercept cluster.

    Attributes:
        sigma2: residual (within-cluster) variance, strictly positive.
        tau2: random-intercept (between-cluster) variance, non-negative.
    """

    sigma2: float
    tau2: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be a positive finite number, got {self.sigma2!r}")
        if not (self.tau2 >= 0 and math.isfinite(self.tau2)):
            raise ValueError(f"tau2 must be a non-negative finite number, got {self.tau2!r}")

    @property
    def icc(self):
        return self.tau2 / (self.tau2 + self.sigma2)

    def dense(self, n):
        """Explicit n x n covariance matrix. For tests and small diagnostics only."""
        return self.sigma2 * np.eye(n) + self.tau2 * np.ones((n, n))


def woodbury_weight(cs, n):
    """Rank-one correction weight tau2 / (sigma2 + n*tau2); broadcasts over n."""
    return cs.tau2 / (cs.sigma2 + np.asarray(n, dtype=float) * cs.tau2)


def cs_inverse_apply(cs, v):
    """Return Sigma^{-1} v for a cluster of size len(v).

    ``v`` may also be an (N, k) matrix, in which case every column is mapped.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    if n < 1:
        raise ValueError("cluster size must be at least 1")
    w = woodbury_weight(cs, n)
    return (v - w * v.sum(axis=0)) / cs.sigma2


def cs_logdet(cs, n):
    """log det(sigma2 I_n + tau2 1 1')."""
    if n < 1:
        raise ValueError("cluster size must be at least 1")
    return (n - 1) * math.log(cs.sigma2) + math.log(cs.sigma2 + n * cs.tau2)


def cs_quadform(cs, u, w):
    """u' Sigma^{-1} w. Either argument may be an (N, k) matrix (returns k x k or k)."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if u.shape[0] != w.shape[0]:
        raise ValueError("u and w must have the same number of rows")
    n = u.shape[0]
    wt = woodbury_weight(cs, n)
    su = u.sum(axis=0)
    sw = w.sum(axis=0)
    cross = u.T @ w
    return (cross - wt * np.multiply.outer(su, sw)) / cs.sigma2

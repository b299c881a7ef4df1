"""Variance estimation for the treatment-effect estimate of a mixed-model fit.

Provides the model-based (inverse weighted Gram) and sandwich covariance of
the GLS coefficients, per-cluster influence values, closed-form asymptotic
variances under a correctly specified random-intercept model, and normal
confidence intervals.
"""

from dataclasses import dataclass
import math

import numpy as np

from .csalg import CompoundSymmetry, woodbury_weight
from .errors import DegreesOfFreedom, InvalidPi, SingularDesign
from .mmfit import _require_rank, weighted_gram

METHODS = ("ModelBased", "Sandwich", "ClusterOLS", "ClusterRobust")


# ---------------------------------------------------------------------------
# Normal quantile
# ---------------------------------------------------------------------------

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p):
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    if p > 1 - _P_LOW:
        return -_acklam(1 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)


def norm_ppf(p):
    """Standard normal quantile.

    Acklam's rational approximation (relative error ~1e-9) polished by Newton
    steps on the complementary error function.
    """
    if not 0 < p < 1:
        if p == 0:
            return -math.inf
        if p == 1:
            return math.inf
        raise ValueError(f"probability must lie in [0, 1], got {p!r}")
    x = _acklam(p)
    for _ in range(2):
        # work in the tail nearest to p to keep relative precision
        if x < 0:
            err = 0.5 * math.erfc(-x / math.sqrt(2)) - p
        else:
            err = (1 - p) - 0.5 * math.erfc(x / math.sqrt(2))
        x -= err * math.sqrt(2 * math.pi) * math.exp(0.5 * x * x)
    return x


def confidence_interval(delta_hat, se, level=0.95):
    """Normal-approximation interval delta_hat -/+ z_{(1+level)/2} * se."""
    if se < 0:
        raise ValueError("standard error must be non-negative")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if math.isinf(se):
        return -math.inf, math.inf
    z = norm_ppf(0.5 * (1 + level))
    return delta_hat - z * se, delta_hat + z * se


@dataclass(frozen=True)
class EstimateReport:
    delta_hat: float
    se: float
    ci_low: float
    ci_high: float
    level: float
    variance_method: str
    estimator_label: str

    @classmethod
    def build(cls, delta_hat, se, level, variance_method, label):
        low, high = confidence_interval(delta_hat, se, level)
        return cls(float(delta_hat), float(se), float(low), float(high), level, variance_method, label)


# ---------------------------------------------------------------------------
# Covariance of the GLS coefficients
# ---------------------------------------------------------------------------


def _df_factor(data, fit, df_adjust):
    m, p = data.m, data.p
    if df_adjust is None:
        df_adjust = fit.estimation_mode == "ML"
    if m <= p + 2:
        raise DegreesOfFreedom(f"need more than p + 2 = {p + 2} clusters, got {m}")
    return m / (m - p - 2) if df_adjust else 1.0


def _scaled_cs(fit, factor):
    return CompoundSymmetry(factor * fit.sigma2_hat, factor * fit.tau2_hat)


def _inverse(gram):
    try:
        return np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(str(exc)) from exc


def model_based_variance(fit, data, df_adjust=None):
    """Inverse of sum_i Q_i' Sigma_i^{-1} Q_i at the df-inflated fitted covariance.

    Sigma_i = c (sigma2 I + tau2 11') with c = m / (m - p - 2). By default the
    factor is applied to ML fits only; REML components already account for the
    fixed-effect degrees of freedom. Returns (covariance matrix, Var(delta_hat)).
    """
    _require_rank(data.moments)
    cs = _scaled_cs(fit, _df_factor(data, fit, df_adjust))
    cov = _inverse(weighted_gram(data, cs))
    cov = 0.5 * (cov + cov.T)
    return cov, float(cov[1, 1])


def residuals(fit, data):
    return data.y - data.design @ fit.beta


def _cluster_scores(fit, data, cs):
    """Rows Q_i' Sigma_i^{-1} r_i, one per cluster."""
    r = residuals(fit, data)
    Qr = np.add.reduceat(data.design * r[:, None], data.offsets, axis=0)
    s = np.add.reduceat(data.design, data.offsets, axis=0)
    rsum = np.add.reduceat(r, data.offsets)
    w = woodbury_weight(cs, data.sizes)
    return (Qr - (w * rsum)[:, None] * s) / cs.sigma2


def sandwich_variance(fit, data, df_adjust=None):
    """Robust bread-meat-bread covariance; returns (matrix, Var(delta_hat))."""
    _require_rank(data.moments)
    cs = _scaled_cs(fit, _df_factor(data, fit, df_adjust))
    bread = _inverse(weighted_gram(data, cs))
    u = _cluster_scores(fit, data, cs)
    cov = bread @ (u.T @ u) @ bread
    cov = 0.5 * (cov + cov.T)
    return cov, float(cov[1, 1])


def estimate(fit, data, variance="ModelBased", level=0.95, label=None, df_adjust=None):
    """EstimateReport for beta_A with the chosen variance estimator."""
    if variance == "ModelBased":
        var = model_based_variance(fit, data, df_adjust)[1]
    elif variance == "Sandwich":
        var = sandwich_variance(fit, data, df_adjust)[1]
    else:
        raise ValueError(f"variance must be 'ModelBased' or 'Sandwich', got {variance!r}")
    label = label or f"mixed-model ({fit.estimation_mode})"
    return EstimateReport.build(fit.delta_hat, math.sqrt(max(var, 0.0)), level, variance, label)


# ---------------------------------------------------------------------------
# Influence function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfluenceDiagnostics:
    if_values: np.ndarray
    v_hat: float
    denom_hat: float
    pi: float


def influence_values(fit, data, pi=0.5, empirical_pi=False):
    """Per-cluster influence values of delta_hat.

    IF_i = (A_i - pi) / (pi (1 - pi) d) * sum_j r_ij / (sigma2 + N_i tau2),
    with d = mean_i N_i / (sigma2 + N_i tau2). ``v_hat`` is mean(IF_i^2).
    ``empirical_pi`` replaces pi by the observed treated fraction.
    """
    if empirical_pi:
        pi = float(np.mean(data.treatment))
    if not 0 < pi < 1:
        raise InvalidPi(f"pi must lie in (0, 1), got {pi!r}")
    sizes = data.sizes.astype(float)
    lam = 1.0 / (fit.sigma2_hat + sizes * fit.tau2_hat)
    rsum = np.add.reduceat(residuals(fit, data), data.offsets)
    denom = float(np.mean(sizes * lam))
    a = data.treatment.astype(float)
    ifv = (a - pi) / (pi * (1 - pi) * denom) * (lam * rsum)
    return InfluenceDiagnostics(if_values=ifv, v_hat=float(np.mean(ifv**2)), denom_hat=denom, pi=pi)


# ---------------------------------------------------------------------------
# Closed-form asymptotic variances (correct specification, pi = 1/2)
# ---------------------------------------------------------------------------


def _as_distribution(n_distribution):
    if isinstance(n_distribution, dict):
        values, probs = zip(*sorted(n_distribution.items()))
    else:
        values, probs = zip(*n_distribution)
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if np.any(values < 1) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, rel_tol=1e-12):
        raise ValueError("cluster-size distribution needs sizes >= 1 and probabilities summing to 1")
    return values, probs


def uniform_sizes(lo, hi):
    """Discrete uniform distribution on {lo, ..., hi} as a size -> probability dict."""
    k = hi - lo + 1
    return {n: 1.0 / k for n in range(lo, hi + 1)}


def balanced_true_variance(sigma2, tau2, n_tilde):
    """Asymptotic variance of sqrt(m) (delta_hat - delta) for constant size n_tilde."""
    if n_tilde < 1 or sigma2 <= 0 or tau2 < 0:
        raise ValueError("need n_tilde >= 1, sigma2 > 0, tau2 >= 0")
    return 4.0 * (sigma2 + n_tilde * tau2) / n_tilde


def mixed_true_variance(sigma2, tau2, n_distribution):
    """4 / E[N / (sigma2 + N tau2)]: mixed-model ANCOVA under correct specification."""
    n, p = _as_distribution(n_distribution)
    return 4.0 / float(p @ (n / (sigma2 + n * tau2)))


def cluster_level_true_variance(sigma2, tau2, n_distribution):
    """4 E[(sigma2 + N tau2) / N]: cluster-level ANCOVA under correct specification."""
    n, p = _as_distribution(n_distribution)
    return 4.0 * float(p @ ((sigma2 + n * tau2) / n))


def holder_ratio(sigma2, tau2, n_distribution):
    """E[(s + N t)/N] * E[N/(s + N t)]; equals 1 iff N is degenerate, else > 1."""
    return cluster_level_true_variance(sigma2, tau2, n_distribution) / mixed_true_variance(
        sigma2, tau2, n_distribution
    )


def jensen_gap(sigma2, tau2, n_distribution):
    """E[N]/(s + E[N] t) - E[N/(s + N t)]; non-negative, strictly so for tau2 > 0 and
    non-degenerate N."""
    n, p = _as_distribution(n_distribution)
    en = float(p @ n)
    return en / (sigma2 + en * tau2) - float(p @ (n / (sigma2 + n * tau2)))

"""Monte Carlo engine: run estimators over replications and summarize them.

Each replication is a pure function of (config, rep_index). Results are
sorted by replication index before any reduction, so the metrics do not
depend on how the work was scheduled.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import math
import warnings

import numpy as np

from .clanova import fit_cluster_ancova
from .dgp import gen_trial
from .errors import CrtAncovaError, NoConvergedReps
from .mmfit import MODES, fit
from .variance import model_based_variance, norm_ppf, sandwich_variance

METHODS = ("MixedUnadjusted", "MixedAncova", "ClusterAncova")
VARIANCES = ("ModelBased", "Sandwich", "ClusterClassical", "ClusterRobust")


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator: point-estimation method, likelihood mode and variance."""

    method: str
    estimation: str = "ML"
    variance: str = None
    label: str = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.estimation not in MODES:
            raise ValueError(f"estimation must be ML or REML, got {self.estimation!r}")
        variance = self.variance
        if variance is None:
            variance = "ClusterClassical" if self.method == "ClusterAncova" else "ModelBased"
            object.__setattr__(self, "variance", variance)
        if variance not in VARIANCES:
            raise ValueError(f"variance must be one of {VARIANCES}, got {variance!r}")
        cluster_var = variance.startswith("Cluster")
        if cluster_var != (self.method == "ClusterAncova"):
            raise ValueError(f"variance {variance} cannot be used with {self.method}")
        if self.label is None:
            object.__setattr__(self, "label", self.method)

    @property
    def is_mixed(self):
        return self.method != "ClusterAncova"


DEFAULT_ROSTER = (
    EstimatorSpec("MixedUnadjusted"),
    EstimatorSpec("MixedAncova"),
    EstimatorSpec("ClusterAncova"),
)


def parse_estimator(token):
    """``Method[:ML|REML][:Variance]`` -> EstimatorSpec, e.g. ``MixedAncova:REML:Sandwich``."""
    parts = [t.strip() for t in token.split(":") if t.strip()]
    if not parts:
        raise ValueError("empty estimator specification")
    method, rest = parts[0], parts[1:]
    estimation, variance = "ML", None
    for item in rest:
        if item.upper() in MODES:
            estimation = item.upper()
        else:
            variance = item
    label = method if not rest else f"{method} ({', '.join(rest)})"
    return EstimatorSpec(method, estimation, variance, label)


@dataclass(frozen=True)
class EstimateOutcome:
    delta_hat: float
    se: float
    converged: bool
    error: str = None


@dataclass(frozen=True)
class ReplicationResult:
    rep_index: int
    data_digest: str
    outcomes: tuple  # one EstimateOutcome per estimator


def _failure(exc):
    return EstimateOutcome(math.nan, math.nan, False, f"{type(exc).__name__}: {exc}")


def _evaluate(data, estimators):
    """Apply every estimator to one dataset, sharing mixed-model fits."""
    fits = {}
    out = []
    for spec in estimators:
        try:
            if spec.method == "ClusterAncova":
                mode = "robust" if spec.variance == "ClusterRobust" else "classical"
                res = fit_cluster_ancova(data, mode)
                out.append(EstimateOutcome(res.delta_hat, res.report.se, True))
                continue
            key = (spec.method, spec.estimation)
            if key not in fits:
                sub = data.drop_covariates() if spec.method == "MixedUnadjusted" else data
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fits[key] = (sub, fit(sub, spec.estimation))
            sub, mf = fits[key]
            if spec.variance == "Sandwich":
                var = sandwich_variance(mf, sub)[1]
            else:
                var = model_based_variance(mf, sub)[1]
            out.append(EstimateOutcome(mf.delta_hat, math.sqrt(max(var, 0.0)), bool(mf.converged)))
        except (CrtAncovaError, np.linalg.LinAlgError, ValueError) as exc:
            out.append(_failure(exc))
    return tuple(out)


def run_replication(config, estimators, rep_index):
    """Generate replication ``rep_index`` and apply every estimator to it."""
    estimators = tuple(estimators)
    if not estimators:
        raise ValueError("at least one estimator is required")
    data, _ = gen_trial(config, rep_index)
    return ReplicationResult(rep_index, data.digest(), _evaluate(data, estimators))


def _run_batch(config, estimators, rep_indices):
    """Arrays (delta, se, ok) of shape (len(rep_indices), n_estimators)."""
    k = len(estimators)
    n = len(rep_indices)
    delta = np.full((n, k), np.nan)
    se = np.full((n, k), np.nan)
    ok = np.zeros((n, k), dtype=bool)
    for row, r in enumerate(rep_indices):
        data, _ = gen_trial(config, r)
        for col, o in enumerate(_evaluate(data, estimators)):
            delta[row, col], se[row, col], ok[row, col] = o.delta_hat, o.se, o.converged
    return np.asarray(rep_indices), delta, se, ok


@dataclass(frozen=True)
class MetricsRow:
    label: str
    bias: float
    emp_se: float
    ase: float
    cp: float
    re: float
    mcse_bias: float
    mcse_emp_se: float
    mcse_cp: float
    mcse_re: float
    n_converged: int
    n_reps: int

    FIELDS = ("label", "bias", "emp_se", "ase", "cp", "re", "mcse_bias", "mcse_emp_se",
              "mcse_cp", "mcse_re", "n_converged", "n_reps")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple
    title: str = ""

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def row(self, label):
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def labels(self):
        return tuple(r.label for r in self.rows)


def _reference_column(estimators, col):
    """Index of the unadjusted estimator that serves as RE reference for ``col``."""
    unadj = [j for j, s in enumerate(estimators) if s.method == "MixedUnadjusted"]
    if not unadj:
        return None
    same = [j for j in unadj if estimators[j].estimation == estimators[col].estimation]
    if estimators[col].is_mixed and same:
        return same[0]
    ml = [j for j in unadj if estimators[j].estimation == "ML"]
    return (ml or unadj)[0]


def _jackknife_re(ref, est):
    """Jackknife SE of var(ref) / var(est) over paired replications."""
    k = ref.size
    if k < 3:
        return math.nan

    def loo_var(x):
        s1 = x.sum()
        s2 = (x * x).sum()
        s1_i = s1 - x
        s2_i = s2 - x * x
        return (s2_i - s1_i**2 / (k - 1)) / (k - 2)

    theta = loo_var(ref) / loo_var(est)
    return float(math.sqrt((k - 1) / k * np.sum((theta - theta.mean()) ** 2)))


def summarize(estimators, delta, se, ok, true_delta, level=0.95, title=""):
    """MetricsTable from per-replication arrays (rows already sorted by rep index)."""
    n_reps = delta.shape[0]
    z = norm_ppf(0.5 * (1 + level))
    rows = []
    emp = {}
    for j, spec in enumerate(estimators):
        d = delta[ok[:, j], j]
        if d.size == 0:
            raise NoConvergedReps(f"{spec.label}: no replication converged")
        emp[j] = float(np.std(d, ddof=1)) if d.size > 1 else math.nan
    for j, spec in enumerate(estimators):
        mask = ok[:, j]
        d = delta[mask, j]
        s = se[mask, j]
        k = d.size
        cover = np.abs(d - true_delta) <= z * s
        cover |= np.isinf(s)
        cp = float(np.mean(cover))
        ref = _reference_column(estimators, j)
        if ref is None:
            re, mcse_re = math.nan, math.nan
        elif ref == j:
            re, mcse_re = 1.0, 0.0
        else:
            re = (emp[ref] / emp[j]) ** 2
            both = mask & ok[:, ref]
            mcse_re = _jackknife_re(delta[both, ref], delta[both, j])
        rows.append(MetricsRow(
            label=spec.label,
            bias=float(np.mean(d) - true_delta),
            emp_se=emp[j],
            ase=float(np.mean(s)),
            cp=cp,
            re=float(re),
            mcse_bias=emp[j] / math.sqrt(k),
            mcse_emp_se=emp[j] / math.sqrt(2 * (k - 1)) if k > 1 else math.nan,
            mcse_cp=math.sqrt(cp * (1 - cp) / k),
            mcse_re=mcse_re,
            n_converged=int(k),
            n_reps=int(n_reps),
        ))
    return MetricsTable(tuple(rows), title)


def simulate(config, estimators, n_reps=None, workers=1, rep_indices=None, chunk_size=250):
    """Per-replication arrays sorted by replication index: (reps, delta, se, ok)."""
    estimators = tuple(estimators)
    if rep_indices is None:
        rep_indices = range(n_reps)
    reps = sorted(int(r) for r in rep_indices)
    if workers is None or workers <= 1 or len(reps) <= chunk_size:
        return _run_batch(config, estimators, reps)
    chunks = [reps[i:i + chunk_size] for i in range(0, len(reps), chunk_size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_batch, [config] * len(chunks), [estimators] * len(chunks), chunks))
    idx = np.concatenate([p[0] for p in parts])
    order = np.argsort(idx, kind="stable")
    return (idx[order],) + tuple(np.concatenate([p[i] for p in parts])[order] for i in (1, 2, 3))


def _title(config):
    gamma = ", gamma" if config.add_gamma else ""
    return f"Scenario {config.scenario}, m={config.m}, pi={config.pi}{gamma}"


def run_study(config, estimators=DEFAULT_ROSTER, n_reps=1000, level=0.95, workers=1):
    """Bias, EmpSE, ASE, coverage and relative efficiency over ``n_reps`` replications."""
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    estimators = tuple(estimators)
    if not estimators:
        raise ValueError("at least one estimator is required")
    _, delta, se, ok = simulate(config, estimators, n_reps, workers)
    return summarize(estimators, delta, se, ok, config.true_delta, level, _title(config))


ML_REML_ROSTER = tuple(
    EstimatorSpec(method, mode, label=f"{method} ({mode})")
    for method in ("MixedUnadjusted", "MixedAncova")
    for mode in MODES
)


def compare_ml_reml(config, n_reps=1000, level=0.95, workers=1):
    """Paired ML and REML fits of the unadjusted and ANCOVA mixed models on shared data."""
    return run_study(config, ML_REML_ROSTER, n_reps, level, workers)

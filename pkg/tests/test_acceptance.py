"""Acceptance checks at full Monte Carlo scale (several minutes on one core).

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary.
"""

from functools import lru_cache
import itertools
import math
import re

import numpy as np
import pytest

from crt_ancova import cli
from crt_ancova.clanova import fit_cluster_ancova
from crt_ancova.csalg import CompoundSymmetry, cs_inverse_apply, cs_logdet, cs_quadform
from crt_ancova.dgp import ScenarioConfig, gen_trial
from crt_ancova.mmfit import estimating_function, fit, gls_beta
from crt_ancova.simkit import EstimatorSpec, simulate, summarize
from crt_ancova.variance import (
    holder_ratio, jensen_gap, model_based_variance, sandwich_variance, uniform_sizes,
)
from oracles import (
    dense_beta, dense_model_based, dense_sandwich, grid_search_ml, random_dataset,
)

N_REPS = 10_000
ROSTER = (
    EstimatorSpec("MixedUnadjusted", "ML", label="unadj-ML"),
    EstimatorSpec("MixedAncova", "ML", label="ancova-ML"),
    EstimatorSpec("ClusterAncova", label="cluster"),
    EstimatorSpec("MixedUnadjusted", "REML", label="unadj-REML"),
    EstimatorSpec("MixedAncova", "REML", label="ancova-REML"),
)
TABLE = ("unadj-ML", "ancova-ML", "cluster")


@lru_cache(maxsize=None)
def study(scenario, m, gamma=False):
    cfg = ScenarioConfig(scenario, m, add_gamma=gamma)
    _, d, s, ok = simulate(cfg, ROSTER, N_REPS)
    return summarize(ROSTER, d, s, ok, cfg.true_delta)


def within(x, target, tol):
    return abs(x - target) <= tol + 1e-12


# values printed in the published simulation tables
EMP_SE_200 = {1: (0.29, 0.30, 0.30), 2: (0.41, 0.34, 0.32), 3: (0.31, 0.29, 0.30)}
RE_200 = {1: (1.00, 0.96, 0.94), 2: (1.00, 1.40, 1.58), 3: (1.00, 1.12, 1.05)}


def test_criterion_1_large_m_table(report_criterion):
    checks = []
    for sc in (1, 2, 3):
        t = study(sc, 200)
        for j, label in enumerate(TABLE):
            r = t.row(label)
            tag = f"S{sc} {label}"
            checks += [
                (f"{tag} bias {r.bias:.4f}", abs(r.bias) <= 0.02),
                (f"{tag} EmpSE {r.emp_se:.4f}", within(r.emp_se, EMP_SE_200[sc][j], 0.02)),
                (f"{tag} ASE-EmpSE {r.ase - r.emp_se:.4f}", within(r.ase, r.emp_se, 0.02)),
                (f"{tag} CP {r.cp:.4f}", 0.94 <= r.cp <= 0.96),
                (f"{tag} RE {r.re:.4f}", within(r.re, RE_200[sc][j], 0.06)),
            ]
    assert report_criterion(1, checks)


def test_criterion_2_small_m_coverage(report_criterion):
    checks = []
    for sc in (1, 2, 3):
        t = study(sc, 20)
        for label in TABLE:
            cp = t.row(label).cp
            checks.append((f"S{sc} {label} CP {cp:.4f}", 0.91 <= cp <= 0.96))
    re = study(2, 20).row("ancova-ML").re
    checks.append((f"S2 ancova RE {re:.4f}", within(re, 1.40, 0.08)))
    assert report_criterion(2, checks)


def test_criterion_3_gamma_variant(report_criterion):
    targets = {(1, "ancova-ML"): (0.99, 0.04), (2, "ancova-ML"): (1.08, 0.05),
               (2, "cluster"): (1.11, 0.05), (3, "ancova-ML"): (1.02, 0.04)}
    checks = []
    for sc in (1, 2, 3):
        t = study(sc, 200, True)
        for label in TABLE:
            r = t.row(label)
            checks.append((f"S{sc} {label} CP {r.cp:.4f}", 0.94 <= r.cp <= 0.96))
            if (sc, label) in targets:
                target, tol = targets[sc, label]
                checks.append((f"S{sc} {label} RE {r.re:.4f}", within(r.re, target, tol)))
    assert report_criterion(3, checks)


def test_criterion_4_ml_versus_reml(report_criterion):
    checks = []
    for sc in (1, 2, 3):
        t = study(sc, 200)
        for method in ("unadj", "ancova"):
            ml, reml = t.row(f"{method}-ML"), t.row(f"{method}-REML")
            for metric in ("bias", "emp_se", "ase", "cp", "re"):
                a, b = getattr(ml, metric), getattr(reml, metric)
                checks.append((f"S{sc} {method} {metric} {a:.4f}/{b:.4f}", abs(a - b) <= 0.01))
    t = study(3, 20)
    ml, reml = t.row("ancova-ML").ase, t.row("ancova-REML").ase
    checks.append((f"S3 m=20 ASE ML {ml:.4f} REML {reml:.4f}", ml - reml >= 0.02))
    assert report_criterion(4, checks)


def test_criterion_5_icc(report_criterion, capsys):
    targets = {(1, False): 0.02, (2, False): 0.09, (3, False): 0.03,
               (1, True): 0.47, (2, True): 0.45, (3, True): 0.47}
    checks = []
    for (sc, gamma), target in targets.items():
        args = ["icc", "--scenario", str(sc), "--mc-clusters", "100000"] + (["--gamma"] if gamma else [])
        assert cli.main(args) == 0
        out = capsys.readouterr().out
        icc = float(re.search(r"icc = ([0-9.]+)", out).group(1))
        checks.append((f"S{sc}{' gamma' if gamma else ''} icc {icc:.4f}", within(icc, target, 0.01)))
    assert report_criterion(5, checks)


def test_criterion_6_oracles(report_criterion):
    checks = []
    rng = np.random.default_rng(606)
    worst = {"params": 0.0, "loglik": 0.0, "beta": 0.0, "model": 0.0, "sandwich": 0.0, "cs": 0.0}
    for _ in range(20):
        d = random_dataset(rng, m=int(rng.integers(8, 20)), p=int(rng.integers(0, 3)),
                           tau2=float(rng.choice([0.0, 0.3, 1.0])))
        f = fit(d, "ML")
        s2, t2, ll = grid_search_ml(d)
        worst["params"] = max(worst["params"], abs(f.sigma2_hat - s2), abs(f.tau2_hat - t2))
        worst["loglik"] = max(worst["loglik"], abs(f.loglik - ll))
        cs = CompoundSymmetry(0.5 + rng.random(), rng.random())
        ref = dense_beta(d, cs.sigma2, cs.tau2)
        worst["beta"] = max(worst["beta"], np.max(np.abs(gls_beta(d, cs) - ref) / (1 + np.abs(ref))))
        c = d.m / (d.m - d.p - 2)
        ref = dense_model_based(d, f.sigma2_hat, f.tau2_hat, c)
        worst["model"] = max(worst["model"], np.max(np.abs(model_based_variance(f, d)[0] - ref) / np.abs(ref).max()))
        ref = dense_sandwich(d, f.beta, f.sigma2_hat, f.tau2_hat, c)
        worst["sandwich"] = max(worst["sandwich"], np.max(np.abs(sandwich_variance(f, d)[0] - ref) / np.abs(ref).max()))
    for s2, t2, n in itertools.product([1e-3, 1.0, 25.0], [0.0, 0.3, 100.0], [1, 3, 12, 40]):
        cs = CompoundSymmetry(s2, t2)
        dense = cs.dense(n)
        inv = np.linalg.inv(dense)
        v = np.linspace(-1, 2, n)
        u = np.column_stack([np.ones(n), v**2])
        scale = np.abs(inv).max() * (1 + np.abs(u).sum())
        err = max(np.max(np.abs(cs_inverse_apply(cs, v) - inv @ v)) / scale,
                  np.max(np.abs(cs_quadform(cs, u, v) - u.T @ inv @ v)) / scale / (1 + np.abs(v).sum()),
                  abs(cs_logdet(cs, n) - np.linalg.slogdet(dense)[1]) / (1 + abs(cs_logdet(cs, n))))
        worst["cs"] = max(worst["cs"], err)
    checks = [
        (f"fit params {worst['params']:.2e}", worst["params"] <= 1e-4),
        (f"fit loglik {worst['loglik']:.2e}", worst["loglik"] <= 1e-6),
        (f"gls_beta {worst['beta']:.2e}", worst["beta"] <= 1e-9),
        (f"model-based {worst['model']:.2e}", worst["model"] <= 1e-9),
        (f"sandwich {worst['sandwich']:.2e}", worst["sandwich"] <= 1e-9),
        (f"csalg {worst['cs']:.2e}", worst["cs"] <= 1e-9),
    ]
    assert report_criterion(6, checks)


def _paired_mcse_sd_difference(a, b):
    """Jackknife MCSE of sd(b) - sd(a) over paired replications."""
    k = a.size

    def loo_sd(x):
        s1, s2 = x.sum(), (x * x).sum()
        return np.sqrt(((s2 - x * x) - (s1 - x) ** 2 / (k - 1)) / (k - 2))

    theta = loo_sd(b) - loo_sd(a)
    return math.sqrt((k - 1) / k * np.sum((theta - theta.mean()) ** 2))


def test_criterion_7_properties(report_criterion):
    checks = []
    rng = np.random.default_rng(707)
    # estimating equations at converged ML fits
    worst = 0.0
    for _ in range(20):
        d = random_dataset(rng, m=int(rng.integers(10, 30)), p=int(rng.integers(0, 3)),
                           tau2=float(rng.choice([0.0, 0.5])))
        f = fit(d, "ML")
        u = estimating_function(d, f.beta, f.cs)
        rel = u.sum(axis=0) / (np.abs(u).sum(axis=0) + 1e-300)
        if f.tau2_hat == 0.0:
            worst = max(worst, np.max(np.abs(rel[:-1])), max(rel[-1], 0.0))
        else:
            worst = max(worst, np.max(np.abs(rel)))
    checks.append((f"score residual {worst:.2e}", worst <= 1e-5))
    # invariances
    worst = 0.0
    for _ in range(10):
        d = random_dataset(rng, m=20, p=1)
        base = fit(d).delta_hat
        scale, shift, yshift = rng.uniform(0.01, 100), rng.uniform(-50, 50), rng.uniform(-1e3, 1e3)
        worst = max(worst,
                    abs(fit(d.with_covariates(d.x * scale + shift)).delta_hat - base),
                    abs(fit(d.with_outcomes(d.y + yshift)).delta_hat - base))
    checks.append((f"invariance {worst:.2e}", worst <= 1e-8))
    # Jensen and Hoelder over a grid
    ok = True
    dists = [uniform_sizes(4, 12), {8: 1.0}, {1: 0.5, 50: 0.5}, {2: 0.2, 3: 0.3, 10: 0.5}]
    for s2, t2, dist in itertools.product([0.1, 1, 25], [0, 0.5, 10], dists):
        ratio, gap = holder_ratio(s2, t2, dist), jensen_gap(s2, t2, dist)
        ok &= ratio >= 1 - 1e-12 and gap >= -1e-12
        if len(dist) > 1:
            ok &= ratio > 1 and (gap > 0 if t2 > 0 else True)
        else:
            ok &= abs(ratio - 1) < 1e-12 and abs(gap) < 1e-12
    checks.append(("Jensen/Hoelder grid", bool(ok)))
    # equal cluster sizes: unadjusted mixed model equals p = 0 cluster-level fit
    worst = 0.0
    for rep in range(10):
        d = gen_trial(ScenarioConfig(2, 40), rep)[0].drop_covariates()
        worst = max(worst, abs(fit(d).delta_hat - fit_cluster_ancova(d).delta_hat))
    checks.append((f"equal-size coincidence {worst:.2e}", worst <= 1e-8))
    # stratified versus simple randomization, unadjusted estimator
    spec = (EstimatorSpec("MixedUnadjusted"),)
    strat = simulate(ScenarioConfig(2, 200, scheme="stratified"), spec, 5000)[1][:, 0]
    simple = simulate(ScenarioConfig(2, 200, scheme="simple"), spec, 5000)[1][:, 0]
    diff = simple.std(ddof=1) - strat.std(ddof=1)
    mcse = _paired_mcse_sd_difference(strat, simple)
    checks.append((f"stratified EmpSE {strat.std(ddof=1):.4f} vs simple {simple.std(ddof=1):.4f}, "
                   f"gap {diff:.4f} = {diff / mcse:.2f} MCSE", diff > 3 * mcse))
    assert report_criterion(7, checks)


def test_criterion_8_variance_consistency(report_criterion):
    roster = (EstimatorSpec("MixedUnadjusted"), EstimatorSpec("MixedAncova"),
              EstimatorSpec("MixedAncova", variance="Sandwich", label="sandwich"))
    checks = []
    for sc in (1, 2, 3):
        _, d, s, ok = simulate(ScenarioConfig(sc, 500), roster, 2000)
        for j, label in enumerate(("unadj", "ancova")):
            good = ok[:, j]
            ratio = np.mean(s[good, j] ** 2) / np.var(d[good, j], ddof=1)
            checks.append((f"S{sc} {label} ratio {ratio:.3f}", 0.9 <= ratio <= 1.1))
        if sc == 3:
            r = s[:, 2] / s[:, 1]
            share = np.mean((r >= 0.9) & (r <= 1.1))
            checks.append((f"S3 sandwich/model within 10% in {share:.3f}", share >= 0.95))
    assert report_criterion(8, checks)

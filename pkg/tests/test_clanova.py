import math

import numpy as np
import pytest

from crt_ancova.clanova import aggregate, fit_cluster_ancova, thm2_gap
from crt_ancova.dgp import ScenarioConfig, gen_trial
from crt_ancova.errors import DegreesOfFreedom, SingularCovariance, SingularDesign
from crt_ancova.mmfit import TrialDataset, fit
from oracles import blocks, random_dataset


def test_cluster_means_match_compensated_sums():
    rng = np.random.default_rng(1)
    d = random_dataset(rng, m=30, p=2, sizes=(1, 40))
    t = aggregate(d)
    for i, (q, y) in enumerate(blocks(d)):
        assert t.ybar[i] == pytest.approx(math.fsum(y) / y.size, rel=1e-13, abs=1e-13)
        for j in range(d.p):
            assert t.xbar[i, j] == pytest.approx(math.fsum(q[:, 2 + j]) / y.size, rel=1e-13, abs=1e-13)


def test_ols_matches_lstsq_and_textbook_variances():
    rng = np.random.default_rng(2)
    d = random_dataset(rng, m=25, p=2)
    t = aggregate(d)
    Z = np.column_stack([np.ones(d.m), t.treatment, t.xbar])
    coef, *_ = np.linalg.lstsq(Z, t.ybar, rcond=None)
    e = t.ybar - Z @ coef
    zi = np.linalg.inv(Z.T @ Z)
    classical = fit_cluster_ancova(d)
    robust = fit_cluster_ancova(d, "robust")
    assert np.allclose(classical.coef, coef, atol=1e-12)
    assert np.allclose(classical.cov, e @ e / (d.m - d.p - 2) * zi, rtol=1e-10)
    assert np.allclose(robust.cov, zi @ Z.T @ np.diag(e**2) @ Z @ zi, rtol=1e-10)
    assert classical.report.variance_method == "ClusterOLS"
    assert robust.report.variance_method == "ClusterRobust"


def test_equal_sizes_unadjusted_coincidence():
    for rep in range(5):
        d, _ = gen_trial(ScenarioConfig(2, 30), rep)
        d0 = d.drop_covariates()
        assert fit_cluster_ancova(d0).delta_hat == pytest.approx(fit(d0).delta_hat, abs=1e-8)
        t = aggregate(d0)
        diff = t.ybar[t.treatment == 1].mean() - t.ybar[t.treatment == 0].mean()
        assert fit_cluster_ancova(d0).delta_hat == pytest.approx(diff, abs=1e-12)


def test_errors():
    rng = np.random.default_rng(3)
    d = random_dataset(rng, m=3, p=1)
    with pytest.raises(DegreesOfFreedom):
        fit_cluster_ancova(d)
    d = random_dataset(rng, m=10, p=1)
    with pytest.raises(SingularDesign):
        fit_cluster_ancova(d.with_covariates(np.column_stack([d.x, -d.x])))
    with pytest.raises(ValueError):
        fit_cluster_ancova(d, "jackknife")
    with pytest.raises(SingularCovariance):
        thm2_gap(d.with_covariates(np.ones_like(d.x)))


def test_projection_gap_vanishes_for_cluster_level_covariate():
    # a covariate constant within clusters has identical individual and
    # cluster-level projections when cluster sizes are equal
    rng = np.random.default_rng(4)
    m, n = 40, 5
    xc = rng.normal(size=m)
    y = np.repeat(2 * xc, n) + rng.normal(size=m * n)
    a = np.tile([0, 1], m // 2)
    d = TrialDataset.from_arrays(y, np.repeat(xc, n), np.full(m, n), a)
    gap = thm2_gap(d)
    assert gap.shape == (1,)
    assert abs(gap[0]) < 1e-10

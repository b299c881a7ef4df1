import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crt_ancova.csalg import CompoundSymmetry
from crt_ancova.errors import SingularDesign
from crt_ancova.mmfit import (
    ClusterRecord, TrialDataset, estimating_function, fit, fit_unadjusted, gls_beta,
    profile_loglik, weighted_gram,
)
from oracles import dense_beta, dense_gram, dense_loglik, grid_search_ml, random_dataset


@pytest.fixture(scope="module")
def datasets():
    rng = np.random.default_rng(20240101)
    return [random_dataset(rng, m=int(rng.integers(8, 20)), p=int(rng.integers(0, 3)),
                           tau2=float(rng.choice([0.0, 0.2, 1.0])))
            for _ in range(20)]


def test_gls_and_likelihood_match_dense(datasets):
    for d in datasets:
        for s2, t2 in [(1.0, 0.0), (0.7, 0.3), (2.5, 4.0)]:
            cs = CompoundSymmetry(s2, t2)
            assert np.allclose(gls_beta(d, cs), dense_beta(d, s2, t2), rtol=1e-9, atol=1e-9)
            assert np.allclose(weighted_gram(d, cs), dense_gram(d, s2, t2), rtol=1e-9, atol=1e-9)
            for mode in ("ML", "REML"):
                assert profile_loglik(d, cs, mode) == pytest.approx(dense_loglik(d, s2, t2, mode), rel=1e-9)


def test_ml_fit_matches_grid_search(datasets):
    for d in datasets:
        f = fit(d, "ML")
        s2, t2, ll = grid_search_ml(d)
        assert f.converged
        assert abs(f.sigma2_hat - s2) <= 1e-4
        assert abs(f.tau2_hat - t2) <= 1e-4
        assert abs(f.loglik - ll) <= 1e-6
        assert np.allclose(f.beta, dense_beta(d, s2, t2), atol=1e-4)


def test_reml_fit_is_a_local_maximum(datasets):
    for d in datasets[:8]:
        f = fit(d, "REML")
        ll = dense_loglik(d, f.sigma2_hat, f.tau2_hat, "REML")
        assert f.loglik == pytest.approx(ll, rel=1e-10)
        for ds, dt in [(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]:
            s2, t2 = f.sigma2_hat * (1 + ds), f.tau2_hat + dt * f.sigma2_hat
            if t2 >= 0:
                assert dense_loglik(d, s2, t2, "REML") <= ll + 1e-9


def _kkt_residual(d, f):
    u = estimating_function(d, f.beta, f.cs)
    total = u.sum(axis=0)
    scale = np.abs(u).sum(axis=0) + 1e-12
    rel = total / scale
    if f.on_boundary or f.tau2_hat == 0:
        # at tau2 = 0 the tau2 score may be negative (constrained maximum)
        assert rel[-1] <= 1e-5
        rel = rel[:-1]
    return np.abs(rel).max()


def test_estimating_equations_vanish_at_ml(datasets):
    for d in datasets:
        f = fit(d, "ML")
        assert _kkt_residual(d, f) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100), shift=st.floats(-50, 50),
       yshift=st.floats(-1e3, 1e3))
def test_rescaling_and_translation_invariance(seed, scale, shift, yshift):
    d = random_dataset(np.random.default_rng(seed), m=14, p=1)
    base = fit(d, "ML")
    moved = fit(d.with_covariates(d.x * scale + shift, d.covariate_names), "ML")
    assert moved.delta_hat == pytest.approx(base.delta_hat, abs=1e-8 * (1 + abs(base.delta_hat)))
    assert moved.beta[2] * scale == pytest.approx(base.beta[2], rel=1e-6, abs=1e-8)
    ty = fit(d.with_outcomes(d.y + yshift), "ML")
    assert ty.delta_hat == pytest.approx(base.delta_hat, abs=1e-8 * (1 + abs(base.delta_hat)))
    assert ty.sigma2_hat == pytest.approx(base.sigma2_hat, rel=1e-6)
    assert ty.tau2_hat == pytest.approx(base.tau2_hat, rel=1e-5, abs=1e-8)


def test_fit_is_invariant_to_cluster_order(datasets):
    d = datasets[0]
    order = np.random.default_rng(3).permutation(d.m)
    a, b = fit(d), fit(d.reorder(order))
    assert a.delta_hat == pytest.approx(b.delta_hat, abs=1e-9)
    assert a.loglik == pytest.approx(b.loglik, rel=1e-12)


def test_zero_between_variance_hits_boundary():
    rng = np.random.default_rng(5)
    n = np.full(30, 6)
    a = np.tile([0, 1], 15)
    # outcomes with negative intracluster correlation: demean within cluster
    e = rng.normal(size=n.sum()).reshape(30, 6)
    e -= e.mean(axis=1, keepdims=True)
    d = TrialDataset.from_arrays(e.ravel() + np.repeat(a, 6), np.empty((180, 0)), n, a)
    f = fit(d, "ML")
    assert f.on_boundary and f.tau2_hat == 0.0
    assert f.sigma2_hat == pytest.approx(np.sum((d.y - d.design @ f.beta) ** 2) / d.y.size)


def test_single_arm_is_singular():
    d = TrialDataset.from_arrays(np.arange(6.0), np.empty((6, 0)), [3, 3], [1, 1])
    with pytest.raises(SingularDesign):
        fit(d)


def test_collinear_covariate_is_singular():
    rng = np.random.default_rng(0)
    d = random_dataset(rng, m=10, p=1)
    dup = d.with_covariates(np.column_stack([d.x, 2 * d.x]))
    with pytest.raises(SingularDesign):
        fit(dup)


def test_unadjusted_drops_covariates(datasets):
    d = next(x for x in datasets if x.p > 0)
    assert fit_unadjusted(d).n_params_p == 0
    assert fit_unadjusted(d).delta_hat == pytest.approx(fit(d.drop_covariates()).delta_hat)


def test_records_and_arrays_agree():
    recs = [ClusterRecord("a", 1, [1.0, 2.0], [[0.5], [1.5]]), ClusterRecord("b", 0, [3.0], [[2.0]])]
    d = TrialDataset(recs, covariate_names=("x",))
    e = TrialDataset.from_arrays([1.0, 2.0, 3.0], [[0.5], [1.5], [2.0]], [2, 1], [1, 0],
                                 cluster_ids=["a", "b"], covariate_names=("x",))
    assert d == e and d.digest() == e.digest()
    assert d.clusters == e.clusters
    with pytest.raises(ValueError):
        ClusterRecord("c", 2, [1.0], [[1.0]])
    with pytest.raises(ValueError):
        ClusterRecord("c", 1, [], np.empty((0, 1)))


def test_rejects_unknown_mode(datasets):
    with pytest.raises(ValueError):
        fit(datasets[0], "GLS")

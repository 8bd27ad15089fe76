import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.stats import norm

from conftest import assert_monotone, assert_rows_stochastic
from curveclust._core import FitOptions
from curveclust.dataset import FunctionalDataset
from curveclust.evaluation import misclassification_rate
from curveclust.mixrhlp import (LogisticProcessParams, MixRHLPParams, RHLPParams, _hessian, fit_em_mixrhlp,
                                fit_rhlp, irls_multiclass, logistic_proportions, mixrhlp_loglik_matrix,
                                multinomial_gradient, multinomial_objective, regime_posteriors, rhlp_loglik,
                                rhlp_mean_curve, sort_regimes)
from curveclust.mixhmmr import poly_design


def random_problem(r, R, m=30):
    xs = np.sort(r.uniform(0, 1, m))
    targets = r.dirichlet(np.ones(R), size=m) * r.uniform(0.5, 3, (m, 1))
    w = LogisticProcessParams(r.normal(0, 2, (R - 1, 2)))
    return xs, targets, w


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 5))
def test_gradient_and_hessian_match_finite_differences(seed, R):
    r = np.random.default_rng(seed)
    xs, t, w = random_problem(r, R)
    g = multinomial_gradient(xs, t, w).ravel()
    H = _hessian(xs, t, w)
    h = 1e-6
    fd_g = np.empty_like(g)
    fd_H = np.empty_like(H)
    for i in range(len(g)):
        e = np.zeros_like(g)
        e[i] = h
        up = LogisticProcessParams(w.w + e.reshape(-1, 2))
        dn = LogisticProcessParams(w.w - e.reshape(-1, 2))
        fd_g[i] = (multinomial_objective(xs, t, up) - multinomial_objective(xs, t, dn)) / (2 * h)
        fd_H[:, i] = (multinomial_gradient(xs, t, up).ravel() - multinomial_gradient(xs, t, dn).ravel()) / (2 * h)
    np.testing.assert_allclose(g, fd_g, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(H, fd_H, rtol=1e-5, atol=1e-5)
    assert np.all(np.linalg.eigvalsh(H) <= 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 4))
def test_irls_monotone_and_matches_quasi_newton(seed, R):
    r = np.random.default_rng(seed)
    xs, t, _ = random_problem(r, R)
    res = irls_multiclass(xs, t)
    assert_monotone(res.objective_trace, rel=0.0)
    assert res.converged and not res.separated

    def f(v):
        w = LogisticProcessParams(v)
        return -multinomial_objective(xs, t, w), -multinomial_gradient(xs, t, w).ravel()
    ref = minimize(f, np.zeros(2 * (R - 1)), jac=True, method="BFGS", options={"gtol": 1e-10})
    assert multinomial_objective(xs, t, res.params) >= -ref.fun - 1e-8


def test_irls_recovers_generating_weights():
    xs = np.linspace(0, 1, 50)
    true = LogisticProcessParams([[8.0, -20.0], [-3.0, 5.0]])
    t = 2.0 * logistic_proportions(xs, true)
    res = irls_multiclass(xs, t)
    np.testing.assert_allclose(res.params.w, true.w, atol=1e-6)


def test_irls_separable_targets_stay_stable():
    # perfectly separable targets: weights grow without bound while the
    # objective climbs towards zero and the boundary stays between classes
    xs = np.linspace(0, 1, 20)
    t = np.column_stack([xs < 0.5, xs >= 0.5]).astype(float)
    res = irls_multiclass(xs, t, max_iter=200)
    assert_monotone(res.objective_trace, rel=0.0)
    assert np.all(np.isfinite(res.params.w))
    assert res.objective_trace[-1] > -1e-4
    w0, w1 = res.params.w[0]
    assert abs(w1) > 100 and xs[9] < -w0 / w1 < xs[10]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.integers(1, 5), st.integers(0, 1000))
def test_proportions_are_distributions(xs, R, seed):
    w = LogisticProcessParams(np.random.default_rng(seed).normal(0, 50, (R - 1, 2)))
    assert_rows_stochastic(logistic_proportions(np.array(xs), w))


def test_rhlp_loglik_matches_direct(rng):
    comp = RHLPParams(LogisticProcessParams([[2.0, -5.0]]), np.array([[0.0, 1.0], [3.0, -1.0]]),
                      np.array([0.5, 2.0]))
    xs = np.linspace(0, 1, 25)
    y = rng.standard_normal(25)
    pi = logistic_proportions(xs, comp.logistic)
    dens = pi * norm.pdf(y[:, None], poly_design(xs, 1) @ comp.betas.T, np.sqrt(comp.sigma2s))
    from curveclust.dataset import Curve
    assert rhlp_loglik(Curve("a", xs, y), comp) == pytest.approx(np.log(dens.sum(1)).sum(), rel=1e-12)
    np.testing.assert_allclose(rhlp_mean_curve(comp, poly_design(xs, 1), xs),
                               (pi * (poly_design(xs, 1) @ comp.betas.T)).sum(1))


def test_sort_regimes_preserves_model():
    comp = RHLPParams(LogisticProcessParams([[-10.0, 20.0], [10.0, -40.0]]), np.array([[1.0], [2.0], [3.0]]),
                      np.array([1.0, 2.0, 3.0]))
    xs = np.linspace(0, 1, 40)
    s = sort_regimes(comp, xs)
    peaks = np.argmax(logistic_proportions(xs, s.logistic), axis=0)
    assert np.all(np.diff(peaks) >= 0)
    np.testing.assert_allclose(rhlp_mean_curve(s, poly_design(xs, 0), xs),
                               rhlp_mean_curve(comp, poly_design(xs, 0), xs), atol=1e-12)


def rhlp_data(seed=0, n_per=15, m=80):
    r = np.random.default_rng(seed)
    xs = np.linspace(0, 1, m)
    shapes = [np.where(xs < 0.3, 0.0, 4.0), np.where(xs < 0.6, 4.0, 0.0) + xs,
              np.where(xs < 0.5, 2.0 - 2 * xs, 5.0)]
    Y = np.vstack([mu + 0.4 * r.standard_normal((n_per, m)) for mu in shapes])
    return FunctionalDataset.from_matrix(xs, Y, np.repeat([1, 2, 3], n_per))


def test_em_monotone_and_recovers():
    ds = rhlp_data()
    params, part, rep = fit_em_mixrhlp(ds, 1, 3, 2, FitOptions(n_init=2, seed=0))
    assert_monotone(rep.objective_trace, rel=1e-10)
    assert_rows_stochastic(part.tau)
    assert misclassification_rate(ds.labels, part.labels()) == 0.0
    lm = mixrhlp_loglik_matrix(ds, params)
    ll = np.log(np.exp(lm) @ params.alphas).sum()
    assert ll == pytest.approx(rep.loglik, rel=1e-6)
    assert params.n_free_parameters() == 2 + 3 * (2 * 2 + 2 + 2)


def test_fit_rhlp_change_point():
    ds = rhlp_data().subset(np.arange(15))
    comp, posts, rep = fit_rhlp(ds, 0, 2, FitOptions(seed=0))
    assert len(posts) == 15
    for p in posts:
        assert_rows_stochastic(p)
    seg = np.argmax(regime_posteriors(ds, comp)[0], axis=1)
    cut = int(np.flatnonzero(np.diff(seg))[0]) + 1
    assert abs(ds.grid()[cut] - 0.3) < 0.03
    back = RHLPParams.from_dict(comp.to_dict())
    np.testing.assert_array_equal(back.logistic.w, comp.logistic.w)
    mp = MixRHLPParams(np.array([1.0]), [comp])
    assert MixRHLPParams.from_dict(mp.to_dict()).K == 1

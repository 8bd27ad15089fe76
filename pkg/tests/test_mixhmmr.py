import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from conftest import assert_monotone, assert_rows_stochastic
from curveclust._core import ConfigError, FitOptions
from curveclust.dataset import Curve, FunctionalDataset, generate_regime_curves
from curveclust.evaluation import misclassification_rate
from curveclust.mixhmmr import (HMMRComponent, MarkovChainParams, MixHMMRParams, cluster_state_profiles,
                                fit_em_mixhmmr, forward_backward, hmmr_mean_curve, poly_design,
                                regime_segmentation)


def enumerate_paths(y, X, chain, betas, sigma2s):
    """Posteriors by summing over every state path."""
    m, R = len(y), chain.R
    b = norm.pdf(y[:, None], X @ betas.T, np.sqrt(sigma2s)[None, :])
    gamma = np.zeros((m, R))
    xi = np.zeros((m - 1, R, R))
    total = 0.0
    for path in itertools.product(range(R), repeat=m):
        pr = chain.initial[path[0]] * b[0, path[0]]
        for j in range(1, m):
            pr *= chain.transition[path[j - 1], path[j]] * b[j, path[j]]
        total += pr
        for j, s in enumerate(path):
            gamma[j, s] += pr
        for j in range(m - 1):
            xi[j, path[j], path[j + 1]] += pr
    return gamma / total, xi / total, np.log(total)


def random_chain(r, R, left_right):
    if left_right:
        A = np.triu(r.uniform(0.1, 1, (R, R)))
        pi = np.zeros(R)
        pi[0] = 1
    else:
        A = r.uniform(0.1, 1, (R, R))
        pi = r.dirichlet(np.ones(R))
    return MarkovChainParams(pi, A / A.sum(1, keepdims=True), left_right)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 3), st.integers(1, 6), st.booleans())
def test_forward_backward_matches_enumeration(seed, R, m, lr):
    r = np.random.default_rng(seed)
    chain = random_chain(r, R, lr)
    xs = np.linspace(0, 1, m)
    X = poly_design(xs, 1)
    betas = r.normal(0, 2, (R, 2))
    s2 = r.uniform(0.2, 2, R)
    y = r.normal(0, 2, m)
    post = forward_backward(y, X, chain, betas, s2)
    g, xi, ll = enumerate_paths(y, X, chain, betas, s2)
    assert post.loglik == pytest.approx(ll, rel=1e-10, abs=1e-10)
    np.testing.assert_allclose(post.gamma, g, atol=1e-10)
    np.testing.assert_allclose(post.xi, xi, atol=1e-10)


def test_forward_backward_long_sequence_is_finite():
    r = np.random.default_rng(0)
    m = 5000
    xs = np.linspace(0, 1, m)
    y = np.where(xs < 0.5, 0.0, 50.0) + 1e-3 * r.standard_normal(m)
    chain = MarkovChainParams.left_right_default(3)
    post = forward_backward(y, poly_design(xs, 0), chain, np.array([[0.0], [50.0], [100.0]]),
                            np.array([1e-6, 1e-6, 1e-6]))
    assert np.isfinite(post.loglik)
    assert_rows_stochastic(post.gamma)
    assert np.all(np.isfinite(post.xi))
    np.testing.assert_allclose(post.xi.sum((1, 2)), 1.0, atol=1e-9)
    assert regime_segmentation(post.gamma)[[0, -1]].tolist() == [1, 2]


def test_chain_validation_and_counts():
    with pytest.raises(ConfigError):
        MarkovChainParams([1, 0], [[0.5, 0.5], [0.5, 0.5]], left_right=True)
    with pytest.raises(ConfigError):
        MarkovChainParams([0.5, 0.6], [[1, 0], [0, 1]])
    assert MarkovChainParams.left_right_default(4).n_free_parameters() == 3
    assert MarkovChainParams.ergodic_default(4).n_free_parameters() == 3 + 12


def hmm_data(seed=0, n=45):
    return generate_regime_curves(3, 3, n, degree=1, seed=seed, noise_sd=0.5, m=80)


@pytest.mark.parametrize("left_right", [True, False])
def test_em_monotone_and_recovers(left_right):
    ds = hmm_data()
    opts = FitOptions(n_init=2, seed=0, init="kmeans_partition")
    params, part, rep = fit_em_mixhmmr(ds, 1, 3, 3, opts, left_right=left_right)
    assert_monotone(rep.objective_trace, rel=1e-10)
    assert_rows_stochastic(part.tau)
    assert misclassification_rate(ds.labels, part.labels()) == 0.0
    for c in params.components:
        assert_rows_stochastic(c.chain.transition)
        if left_right:
            assert np.all(np.tril(c.chain.transition, -1) == 0)
            assert c.chain.initial.tolist() == [1.0, 0.0, 0.0]


def step_data(seed=0, n_per=15, m=90):
    r = np.random.default_rng(seed)
    levels = [(0, 3, 6), (6, 0, 3), (3, 6, 0)]
    cuts = [(0, 20, 50, m), (0, 35, 60, m), (0, 15, 70, m)]
    xs = np.linspace(0, 1, m)
    Y, lab = [], []
    for k in range(3):
        mu = np.repeat(levels[k], np.diff(cuts[k]))
        Y.append(mu + 0.5 * r.standard_normal((n_per, m)))
        lab += [k + 1] * n_per
    return FunctionalDataset.from_matrix(xs, np.vstack(Y), lab, meta={"change_points": cuts})


def test_left_right_change_points():
    ds = step_data()
    params, part, _ = fit_em_mixhmmr(ds, 0, 3, 3, FitOptions(n_init=2, seed=0, init="kmeans_partition"))
    assert misclassification_rate(ds.labels, part.labels()) == 0.0
    ux, profiles = cluster_state_profiles(ds, params, part.tau)
    np.testing.assert_array_equal(ux, ds.grid())
    found = set()
    for prof in profiles:
        assert_rows_stochastic(prof)
        seg = regime_segmentation(prof)
        found.add((0,) + tuple(int(c) for c in np.flatnonzero(np.diff(seg)) + 1) + (len(seg),))
    assert found == set(ds.meta["change_points"])


def test_non_common_grid():
    r = np.random.default_rng(1)
    curves = []
    for i in range(20):
        xs = np.sort(r.choice(np.linspace(0, 1, 60), r.integers(30, 60), replace=False))
        mu = np.where(xs < 0.5, 0.0, 4.0) if i % 2 else np.where(xs < 0.3, 4.0, 0.0)
        curves.append(Curve(f"c{i}", xs, mu + 0.3 * r.standard_normal(len(xs)), i % 2 + 1))
    ds = FunctionalDataset(tuple(curves))
    params, part, rep = fit_em_mixhmmr(ds, 0, 2, 2, FitOptions(n_init=2))
    assert misclassification_rate(ds.labels, part.labels()) == 0.0
    assert_monotone(rep.objective_trace, rel=1e-10)
    ux, prof = cluster_state_profiles(ds, params, part.tau)
    assert len(ux) == len(np.unique(np.concatenate([c.xs for c in curves])))


def test_mean_curve_and_round_trip():
    comp = HMMRComponent(MarkovChainParams.left_right_default(2), np.array([[0.0, 1.0], [2.0, 0.0]]),
                         np.array([1.0, 1.0]))
    X = poly_design([0.0, 1.0], 1)
    np.testing.assert_allclose(hmmr_mean_curve(comp, X, np.array([[1, 0], [0.5, 0.5]])), [0.0, 1.5])
    params = MixHMMRParams(np.array([1.0]), [comp], 1)
    back = MixHMMRParams.from_dict(params.to_dict())
    np.testing.assert_array_equal(back.components[0].chain.transition, comp.chain.transition)
    assert params.n_free_parameters() == 0 + 2 * 2 + 2 + 1

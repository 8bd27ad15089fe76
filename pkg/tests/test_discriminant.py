import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from conftest import assert_rows_stochastic
from curveclust._core import DataError, FitOptions
from curveclust.basis import BasisSpec, build_design
from curveclust.dataset import FunctionalDataset, WaveformSpec, generate_waveform
from curveclust.discriminant import (FldaModel, FmdaModel, cross_validate, posterior_from_logliks, predict,
                                     stratified_folds, train_flda, train_fmda)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 5), st.integers(1, 10))
def test_posterior_algebra(seed, G, n):
    r = np.random.default_rng(seed)
    logf = r.normal(-500, 200, (n, G))
    priors = r.dirichlet(np.ones(G))
    post = posterior_from_logliks(logf, priors)
    assert_rows_stochastic(post, tol=1e-12)
    ref = np.log(priors) + logf
    ref = np.exp(ref - ref.max(1, keepdims=True))
    np.testing.assert_allclose(post, ref / ref.sum(1, keepdims=True), atol=1e-12)


def test_flda_matches_per_class_least_squares():
    ds = generate_waveform(WaveformSpec(90, seed=0))
    basis = BasisSpec("bspline", 3, 5)
    model = train_flda(ds, "bspline", basis)
    assert model.classes == [1, 2, 3]
    np.testing.assert_allclose(model.priors, [1 / 3] * 3)
    X = build_design(ds.grid(), model.class_models[0].basis)
    for g, cm in enumerate(model.class_models):
        Yg = ds.matrix()[ds.labels == g + 1]
        beta, *_ = np.linalg.lstsq(np.tile(X, (len(Yg), 1)), Yg.ravel(), rcond=None)
        np.testing.assert_allclose(cm.betas[0], beta, rtol=1e-8, atol=1e-10)
    ll = model.class_logliks(ds.subset([0]))
    c = ds.curves[0]
    cm = model.class_models[1]
    expect = norm.logpdf(c.ys, X @ cm.betas[0], np.sqrt(cm.sigma2s[0])).sum()
    assert ll[0, 1] == pytest.approx(expect, rel=1e-10)


def test_flda_waveform_accuracy():
    train = generate_waveform(WaveformSpec(300, seed=1))
    test = generate_waveform(WaveformSpec(300, seed=2))
    model = train_flda(train, "bspline", BasisSpec("bspline", 3, 8))
    labels, post = predict(model, test)
    assert_rows_stochastic(post)
    assert np.mean(labels != test.labels) < 0.25


def test_training_errors():
    ds = FunctionalDataset.from_matrix([0, 1, 2], np.ones((3, 3)), [1, 1, 2])
    with pytest.raises(DataError, match="single curve"):
        train_flda(ds, "polynomial", BasisSpec("polynomial", 1))
    with pytest.raises(DataError):
        train_flda(FunctionalDataset.from_matrix([0, 1], np.ones((2, 2))), "polynomial")
    with pytest.raises(DataError, match="two classes"):
        train_flda(FunctionalDataset.from_matrix([0, 1], np.ones((2, 2)), [1, 1]), "polynomial")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=5, max_size=60), st.integers(2, 6), st.integers(0, 100))
def test_stratified_folds_balanced(labels, n_folds, seed):
    labels = np.array(labels)
    folds = stratified_folds(labels, n_folds, seed)
    assert folds.min() >= 0 and folds.max() < n_folds
    for g in np.unique(labels):
        counts = np.bincount(folds[labels == g], minlength=n_folds)
        assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(folds, stratified_folds(labels, n_folds, seed))


def test_cross_validate_deterministic():
    ds = generate_waveform(WaveformSpec(60, seed=3))
    train = lambda d: train_flda(d, "polynomial", BasisSpec("polynomial", 4))
    a = cross_validate(ds, train, 5, seed=7)
    assert a == cross_validate(ds, train, 5, seed=7)
    assert 0 <= a < 0.5


def two_mode_classes(seed=0, n=30, m=60):
    r = np.random.default_rng(seed)
    xs = np.linspace(0, 1, m)
    up, down = np.where(xs < 0.5, 0.0, 2.0), np.where(xs < 0.5, 2.0, 0.0)
    c1 = np.vstack([up if i % 2 else down for i in range(n)]) + r.standard_normal((n, m))
    c2 = 1.0 + r.standard_normal((n, m))
    return FunctionalDataset.from_matrix(xs, np.vstack([c1, c2]), [1] * n + [2] * n)


def test_fmda_and_rhlp_flda():
    train, test = two_mode_classes(0), two_mode_classes(1)
    opts = FitOptions(n_init=2, max_iter=100, seed=0)
    fmda = train_fmda(train, [2, 1], [2, 2], degree=0, opts=opts)
    flda = train_flda(train, "rhlp", BasisSpec("polynomial", 0), R=2, opts=opts)
    e_fmda = np.mean(predict(fmda, test)[0] != test.labels)
    e_flda = np.mean(predict(flda, test)[0] != test.labels)
    assert e_fmda <= e_flda and e_fmda < 0.05
    assert isinstance(FmdaModel.from_dict(fmda.to_dict()), FmdaModel)
    back = FldaModel.from_dict(flda.to_dict())
    np.testing.assert_allclose(back.class_logliks(test), flda.class_logliks(test))

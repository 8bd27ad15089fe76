import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import assert_monotone, assert_rows_stochastic
from curveclust._core import LOG2PI, ConfigError, FitOptions, InfeasibleSegmentationError
from curveclust.dataset import FunctionalDataset, generate_regime_curves
from curveclust.evaluation import misclassification_rate
from curveclust.pwrm import (PWRMParams, Segmentation, distortion, dp_segment, fit_cem_pwrm, fit_em_pwrm,
                             interpolated_mean_curve)


def segment_cost(xs, Y, w, lo, hi, degree, cost, floor=1e-12):
    """Weighted least squares fit of one segment, straight from the normal equations."""
    X = np.vander(xs[lo:hi], degree + 1, increasing=True)
    ybar = w @ Y[:, lo:hi] / w.sum()
    beta = np.linalg.lstsq(X, ybar, rcond=None)[0]
    sse = float(w @ ((Y[:, lo:hi] - X @ beta) ** 2).sum(1))
    if cost == "sse":
        return sse
    N = w.sum() * (hi - lo)
    s = max(sse / N, floor)
    return 0.5 * (N * (LOG2PI + np.log(s)) + sse / s)


def brute_force(xs, Y, w, R, degree, min_len, cost):
    m = Y.shape[1]
    best, arg = np.inf, None
    for cuts in itertools.combinations(range(1, m), R - 1):
        b = (0,) + cuts + (m,)
        if min(np.diff(b)) < min_len:
            continue
        c = sum(segment_cost(xs, Y, w, b[r], b[r + 1], degree, cost) for r in range(R))
        # strict improvement keeps the earliest boundaries among ties
        if arg is None or c < best - 1e-9 * max(1, abs(best)):
            best, arg = c, b
    return best, arg


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(0, 2), st.sampled_from(["sse", "gaussian"]))
def test_dp_matches_brute_force(seed, R, degree, cost):
    r = np.random.default_rng(seed)
    m = int(r.integers(R * (degree + 1), 13))
    n = int(r.integers(1, 4))
    xs = np.sort(r.uniform(0, 1, m))
    Y = r.standard_normal((n, m)) + np.repeat(r.normal(0, 3, R), -(-m // R))[:m]
    w = r.uniform(0.1, 2, n)
    res = dp_segment(Y, w, R, degree, xs=xs, cost=cost)
    best, arg = brute_force(xs, Y, w, R, degree, degree + 1, cost)
    assert res.cost == pytest.approx(best, rel=1e-7, abs=1e-8)
    assert tuple(res.boundaries) == arg


def test_dp_ties_pick_earliest():
    # a constant curve makes every split optimal
    res = dp_segment(np.ones((1, 6)), R=3, degree=0)
    assert res.boundaries.tolist() == [0, 1, 2, 6]


def test_dp_exact_step():
    y = np.array([[0, 0, 0, 5, 5, 5, 5]], dtype=float)
    res = dp_segment(y, R=2)
    assert res.boundaries.tolist() == [0, 3, 7] and res.cost == pytest.approx(0.0)
    np.testing.assert_allclose(res.betas[:, 0], [0, 5])


def test_dp_infeasible_and_bad_input():
    with pytest.raises(InfeasibleSegmentationError):
        dp_segment(np.zeros((1, 5)), R=3, degree=1)
    with pytest.raises(ConfigError):
        dp_segment(np.zeros((1, 5)), R=0)
    with pytest.raises(ConfigError):
        dp_segment(np.zeros((1, 5)), cost="l1")
    with pytest.raises(ConfigError):
        Segmentation([0, 3, 3, 5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 100))
def test_dp_weight_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    Y = r.standard_normal((3, 15))
    w = r.uniform(0.1, 1, 3)
    a = dp_segment(Y, w, 3, 1)
    b = dp_segment(Y, c * w, 3, 1)
    assert a.boundaries.tolist() == b.boundaries.tolist()
    assert b.cost == pytest.approx(c * a.cost, rel=1e-8, abs=1e-10)


def test_segmentation_helpers():
    s = Segmentation([0, 2, 5])
    assert s.R == 2 and s.m == 5 and s.interior() == [2]
    np.testing.assert_array_equal(s.regime_of_points(), [0, 0, 1, 1, 1])


def regime_data(K=3, R=3, n=60, seed=2, degree=0):
    return generate_regime_curves(K, R, n, degree=degree, seed=seed, noise_sd=0.5, m=60)


@pytest.mark.parametrize("variance", ["regime", "cluster", "shared"])
def test_em_recovers_and_is_monotone(variance):
    ds = regime_data()
    params, part, rep = fit_em_pwrm(ds, 0, 3, 3, FitOptions(n_init=3, seed=0), variance=variance)
    assert_monotone(rep.objective_trace, rel=1e-9)
    assert_rows_stochastic(part.tau)
    assert misclassification_rate(ds.labels, part.labels()) == 0.0
    truth = sorted(map(tuple, ds.meta["change_points"]))
    assert sorted(tuple(c.segmentation.boundaries.tolist()) for c in params.clusters) == truth


def test_cem_monotone_and_hard():
    ds = regime_data(degree=1)
    params, part, rep = fit_cem_pwrm(ds, 1, 3, 3, FitOptions(n_init=3, seed=0))
    assert_monotone(rep.objective_trace, rel=1e-9)
    assert rep.converged and rep.objective == "complete_loglik"
    assert misclassification_rate(ds.labels, part.labels) == 0.0


def test_constrained_cem_is_affine_in_distortion():
    ds = regime_data(seed=5)
    Y = ds.matrix()
    params, part, rep = fit_cem_pwrm(ds, 0, 3, 3, FitOptions(seed=1), constrained=True)
    assert params.equal_proportions and params.variance == "shared"
    s = params.clusters[0].sigma2s[0]
    n, m = Y.shape
    D = distortion(Y, part.labels, params)
    lc = -0.5 * n * m * (LOG2PI + np.log(s)) - D / (2 * s) + n * np.log(1 / 3)
    mu = params.mean_curves()
    direct = sum(-0.5 * m * (LOG2PI + np.log(s)) - ((Y[i] - mu[l - 1]) ** 2).sum() / (2 * s) + np.log(1 / 3)
                 for i, l in enumerate(part.labels))
    assert lc == pytest.approx(direct, rel=1e-12)
    assert rep.extra["distortion"] == pytest.approx(D)
    with pytest.raises(ConfigError):
        fit_cem_pwrm(ds, 1, 3, 3, constrained=True)


def test_cem_repairs_empty_cluster():
    # two identical groups; a third cluster asked for must be filled by repair
    Y = np.vstack([np.zeros((5, 10)), np.ones((5, 10))])
    ds = FunctionalDataset.from_matrix(np.arange(10.0), Y + 1e-3 * np.random.default_rng(0).standard_normal(Y.shape))
    params, part, rep = fit_cem_pwrm(ds, 0, 3, 1, FitOptions(seed=0), init_labels=[3, 1, 1, 1, 1, 3, 2, 2, 2, 2])
    assert rep.extra["repairs"] >= 1
    assert np.bincount(part.labels, minlength=4)[1:].min() >= 1


def test_free_parameters():
    ds = regime_data(n=30)
    params, _, _ = fit_em_pwrm(ds, 1, 3, [2, 3, 3], FitOptions(max_iter=3))
    # K-1 + sum_k (R_k - 1 + R_k * p + R_k)
    assert params.n_free_parameters() == 2 + (1 + 4 + 2) + 2 * (2 + 6 + 3)
    shared = PWRMParams(params.alphas, params.clusters, 1, params.grid, "shared", True)
    assert shared.n_free_parameters() == (1 + 4) + 2 * (2 + 6) + 1


def test_interpolated_mean_curve():
    ds = regime_data(K=1, R=2, n=5)
    params, _, _ = fit_em_pwrm(ds, 0, 1, 2, FitOptions(max_iter=5))
    c = params.clusters[0]
    x, y = interpolated_mean_curve(c, ds.grid())
    b = c.segmentation.boundaries[1]
    assert len(x) == 61 and np.all(np.diff(x) > 0)
    assert y[b] == pytest.approx(0.5 * (c.betas[0, 0] + c.betas[1, 0]))


def test_round_trip_dict():
    ds = regime_data(n=30)
    params, _, _ = fit_em_pwrm(ds, 1, 2, 2, FitOptions(max_iter=3))
    back = PWRMParams.from_dict(params.to_dict())
    np.testing.assert_array_equal(back.mean_curves(), params.mean_curves())

"""Piecewise regression mixtures: joint curve clustering and optimal segmentation.

Every cluster owns a segmentation of the common grid into contiguous
regimes, each fitted by a polynomial. Segmentations come from an exact
dynamic program over cut positions; EM and CEM alternate it with the usual
membership updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import evaluation
from ._core import (ConfigError, DataError, EmptyClusterError, FitOptions,
                    FitReport, HardPartition, InfeasibleSegmentationError, LOG2PI, SoftPartition,
                    mixture_loglik, one_hot, rel_change, log)
from .dataset import FunctionalDataset
from .mixreg import initial_labels, run_restarts

VARIANCE_MODES = ("regime", "cluster", "shared")


@dataclass
class Segmentation:
    """Cut indices ``0 = b_0 < b_1 < ... < b_R = m``; regime r covers ``[b_r, b_{r+1})``."""

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=int)
        if b.ndim != 1 or len(b) < 2 or b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ConfigError(f"invalid segmentation {b.tolist()}")
        self.boundaries = b

    @property
    def R(self) -> int:
        return len(self.boundaries) - 1

    @property
    def m(self) -> int:
        return int(self.boundaries[-1])

    def slices(self) -> list:
        b = self.boundaries
        return [slice(int(b[r]), int(b[r + 1])) for r in range(self.R)]

    def regime_of_points(self) -> np.ndarray:
        return np.repeat(np.arange(self.R), np.diff(self.boundaries))

    def interior(self) -> list:
        return self.boundaries[1:-1].tolist()


@dataclass
class DPResult:
    segmentation: Segmentation
    betas: np.ndarray    # (R, p)
    sse: np.ndarray      # per-regime weighted residual sums
    weight: float        # total curve weight
    cost: float          # total objective minimized by the DP

    @property
    def boundaries(self):
        return self.segmentation.boundaries


def _poly(xs, degree):
    return np.vander(np.asarray(xs, dtype=float), degree + 1, increasing=True)


def _weighted_summary(Y: np.ndarray, w: np.ndarray):
    W = float(w.sum())
    ybar = (w @ Y) / W
    v = w @ (Y - ybar) ** 2
    return W, ybar, v


def segment_sse_table(xs, Y, weights, degree: int, min_len: int) -> np.ndarray:
    """``C[a, b]`` = weighted residual sum of squares of the best polynomial on
    points ``a..b-1`` (``inf`` for segments shorter than ``min_len``).
    """
    xs = np.asarray(xs, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    w = np.asarray(weights, dtype=float)
    m = len(xs)
    W, ybar, v = _weighted_summary(Y, w)
    # rescaled abscissa keeps the triangular factors well conditioned
    u = 2.0 * (xs - xs[0]) / (xs[-1] - xs[0]) - 1.0 if m > 1 and xs[-1] > xs[0] else np.zeros(m)
    rss = _growing_rss(_poly(u, degree), ybar, min_len)
    V = np.concatenate([[0.0], np.cumsum(v)])
    a_idx, b_idx = np.triu_indices(m + 1, k=min_len)
    C = np.full((m + 1, m + 1), np.inf)
    C[a_idx, b_idx] = V[b_idx] - V[a_idx] + W * rss[a_idx, b_idx]
    return C


def _growing_rss(U: np.ndarray, y: np.ndarray, min_len: int) -> np.ndarray:
    """Least squares residual sum of squares of ``y[a:b]`` on ``U[a:b]`` for
    every segment, by Givens updates of one QR factor per start ``a``.

    All starts are advanced together, one point per step. This avoids the
    cancellation of prefix-sum normal equations on short segments.
    """
    m, p = U.shape
    Rf = np.zeros((m, p, p))
    z = np.zeros((m, p))
    acc = np.zeros(m)
    out = np.full((m + 1, m + 1), np.inf)
    for t in range(m):
        n_act = m - t
        x = U[t:].copy()
        r = y[t:].copy()
        Rs, zs = Rf[:n_act], z[:n_act]
        for k in range(p):
            d, xk = Rs[:, k, k], x[:, k]
            h = np.hypot(d, xk)
            safe = h > 0
            c = np.where(safe, d / np.where(safe, h, 1.0), 1.0)[:, None]
            s = np.where(safe, xk / np.where(safe, h, 1.0), 0.0)[:, None]
            row, xr = Rs[:, k, k:].copy(), x[:, k:].copy()
            Rs[:, k, k:] = c * row + s * xr
            x[:, k:] = c * xr - s * row
            zk = zs[:, k].copy()
            zs[:, k] = c[:, 0] * zk + s[:, 0] * r
            r = c[:, 0] * r - s[:, 0] * zk
        acc[:n_act] += r ** 2
        if t + 1 >= min_len:
            a = np.arange(n_act)
            out[a, a + t + 1] = acc[:n_act]
    return out


def gaussian_cost_table(sse_table: np.ndarray, W: float, floor: float) -> np.ndarray:
    """Negative maximized Gaussian log-likelihood of each segment with its own
    (floored) variance."""
    m1 = sse_table.shape[0]
    length = np.arange(m1)[None, :] - np.arange(m1)[:, None]
    N = W * length
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.maximum(sse_table / N, floor)
        cost = 0.5 * (N * (LOG2PI + np.log(s)) + sse_table / s)
    cost[~np.isfinite(sse_table)] = np.inf
    return cost


def optimal_partition(C: np.ndarray, R: int) -> tuple:
    """Exact DP minimizing ``sum_r C[b_r, b_{r+1}]`` over R segments of ``[0, m)``.

    Runs on suffixes so that, among equal-cost solutions, the boundary
    vector chosen is the lexicographically smallest.
    """
    m = C.shape[0] - 1
    F = np.full((R + 1, m + 1), np.inf)
    F[0, m] = 0.0
    for r in range(1, R + 1):
        # F[r, a] = min_b C[a, b] + F[r-1, b]
        F[r, :] = np.min(C + F[r - 1][None, :], axis=1)
    if not np.isfinite(F[R, 0]):
        raise InfeasibleSegmentationError(f"cannot split {m} points into {R} segments")
    bounds = [0]
    a = 0
    for r in range(R, 0, -1):
        tot = C[a, :] + F[r - 1, :]
        b = int(np.argmin(tot))
        bounds.append(b)
        a = b
    return np.array(bounds), float(F[R, 0])


def dp_segment(curves, weights=None, R: int = 2, degree: int = 0, xs=None,
               min_seg_len: Optional[int] = None, cost: str = "sse",
               variance_floor: float = 1e-12) -> DPResult:
    """Optimal weighted piecewise polynomial segmentation of curves on a common grid.

    ``curves`` is a :class:`FunctionalDataset` or an (n, m) response array
    (then ``xs`` gives the grid). ``cost="sse"`` minimizes the weighted
    residual sum of squares; ``cost="gaussian"`` minimizes the negative
    Gaussian log-likelihood with one variance per regime.
    """
    if isinstance(curves, FunctionalDataset):
        curves.require_common_grid("dp_segment")
        xs, Y = curves.grid(), curves.matrix()
    else:
        Y = np.atleast_2d(np.asarray(curves, dtype=float))
        xs = np.arange(Y.shape[1], dtype=float) if xs is None else np.asarray(xs, dtype=float)
    n, m = Y.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not w.sum() > 0:
        raise DataError("weights must be non-negative with a positive sum")
    if R < 1:
        raise ConfigError("R must be >= 1")
    min_len = degree + 1 if min_seg_len is None else int(min_seg_len)
    if R * min_len > m:
        raise InfeasibleSegmentationError(f"{m} points cannot hold {R} segments of length >= {min_len}")
    table = segment_sse_table(xs, Y, w, degree, min_len)
    W = float(w.sum())
    if cost == "sse":
        bounds, _ = optimal_partition(table, R)
    elif cost == "gaussian":
        bounds, _ = optimal_partition(gaussian_cost_table(table, W, variance_floor), R)
    else:
        raise ConfigError(f"unknown cost {cost!r}")
    seg = Segmentation(bounds)
    betas, sse = _fit_segments(xs, Y, w, seg, degree)
    if cost == "sse":
        total = float(sse.sum())
    else:
        N = W * np.diff(bounds)
        s = np.maximum(sse / N, variance_floor)
        total = float(0.5 * np.sum(N * (LOG2PI + np.log(s)) + sse / s))
    return DPResult(seg, betas, sse, W, total)


def _fit_segments(xs, Y, w, seg: Segmentation, degree: int):
    """Weighted OLS per regime; all curves share the design, so the fit is
    the OLS of the weighted mean curve."""
    W = w.sum()
    ybar = (w @ Y) / W
    betas, sse = [], []
    for sl in seg.slices():
        X = _poly(xs[sl], degree)
        beta = np.linalg.lstsq(X, ybar[sl], rcond=None)[0]
        resid = Y[:, sl] - X @ beta
        betas.append(beta)
        sse.append(float(w @ (resid ** 2).sum(1)))
    return np.array(betas), np.array(sse)


@dataclass
class PWRMCluster:
    segmentation: Segmentation
    betas: np.ndarray       # (R, p)
    sigma2s: np.ndarray     # (R,), equal entries unless variance="regime"

    @property
    def R(self) -> int:
        return self.segmentation.R

    def mean_curve(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        out = np.empty(len(xs))
        for r, sl in enumerate(self.segmentation.slices()):
            out[sl] = _poly(xs[sl], self.betas.shape[1] - 1) @ self.betas[r]
        return out

    def variance_curve(self) -> np.ndarray:
        return self.sigma2s[self.segmentation.regime_of_points()]


@dataclass
class PWRMParams:
    alphas: np.ndarray
    clusters: list
    degree: int
    grid: np.ndarray
    variance: str = "regime"
    equal_proportions: bool = False

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.grid = np.asarray(self.grid, dtype=float)
        if len(self.clusters) != len(self.alphas):
            raise ConfigError("one cluster record per proportion is required")
        if self.variance not in VARIANCE_MODES:
            raise ConfigError(f"variance must be one of {VARIANCE_MODES}")

    @property
    def K(self) -> int:
        return len(self.alphas)

    @property
    def p(self) -> int:
        return self.degree + 1

    def n_free_parameters(self) -> int:
        nu = 0 if self.equal_proportions else self.K - 1
        for c in self.clusters:
            nu += (c.R - 1) + c.R * self.p
            nu += c.R if self.variance == "regime" else (1 if self.variance == "cluster" else 0)
        if self.variance == "shared":
            nu += 1
        return nu

    def mean_curves(self, xs=None) -> np.ndarray:
        xs = self.grid if xs is None else xs
        return np.vstack([c.mean_curve(xs) for c in self.clusters])

    def to_dict(self) -> dict:
        return {"family": "pwrm", "K": self.K, "degree": self.degree, "variance": self.variance,
                "equal_proportions": self.equal_proportions, "grid": self.grid.tolist(),
                "alphas": self.alphas.tolist(),
                "clusters": [{"boundaries": c.segmentation.boundaries.tolist(), "betas": c.betas.tolist(),
                              "sigma2s": c.sigma2s.tolist()} for c in self.clusters]}

    @classmethod
    def from_dict(cls, d: dict) -> "PWRMParams":
        clusters = [PWRMCluster(Segmentation(c["boundaries"]), np.array(c["betas"], dtype=float),
                                np.array(c["sigma2s"], dtype=float)) for c in d["clusters"]]
        return cls(np.array(d["alphas"]), clusters, int(d["degree"]), np.array(d["grid"]),
                   d.get("variance", "regime"), bool(d.get("equal_proportions", False)))


def interpolated_mean_curve(cluster: PWRMCluster, xs) -> tuple:
    """Mean curve with a junction point inserted at every regime border.

    The junction sits halfway between the neighbouring grid points and takes
    the average of the two adjacent polynomials, removing the jump for
    display. Returns ``(x, yhat)``.
    """
    xs = np.asarray(xs, dtype=float)
    base = cluster.mean_curve(xs)
    px, py = [], []
    deg = cluster.betas.shape[1] - 1
    for r, sl in enumerate(cluster.segmentation.slices()):
        if r > 0:
            xm = 0.5 * (xs[sl.start - 1] + xs[sl.start])
            left = _poly([xm], deg) @ cluster.betas[r - 1]
            right = _poly([xm], deg) @ cluster.betas[r]
            px.append(xm)
            py.append(float(0.5 * (left[0] + right[0])))
        px.extend(xs[sl].tolist())
        py.extend(base[sl].tolist())
    return np.array(px), np.array(py)


def _as_R_list(R, K):
    if isinstance(R, (int, np.integer)):
        Rs = [int(R)] * K
    else:
        Rs = [int(r) for r in R]
    if len(Rs) != K or min(Rs) < 1:
        raise ConfigError("R must be a positive integer or one positive integer per cluster")
    return Rs


def _component_logliks(Y: np.ndarray, params: PWRMParams) -> np.ndarray:
    mu = params.mean_curves()
    var = np.vstack([c.variance_curve() for c in params.clusters])
    const = -0.5 * np.sum(LOG2PI + np.log(var), axis=1)
    out = np.empty((Y.shape[0], params.K))
    for k in range(params.K):
        out[:, k] = const[k] - 0.5 * np.sum((Y - mu[k]) ** 2 / var[k], axis=1)
    return out


def _m_step(xs, Y, tau, Rs, degree, variance, floor, min_len, equal_proportions=False) -> PWRMParams:
    n, K = tau.shape
    nk = tau.sum(0)
    if np.any(nk < 1.0 / n ** 2):
        raise EmptyClusterError(f"cluster(s) {np.flatnonzero(nk < 1.0 / n ** 2).tolist()} lost all weight")
    alphas = np.full(K, 1.0 / K) if equal_proportions else nk / n
    m = len(xs)
    clusters, total_sse = [], 0.0
    for k in range(K):
        cost = "gaussian" if variance == "regime" else "sse"
        res = dp_segment(Y, tau[:, k], Rs[k], degree, xs=xs, min_seg_len=min_len, cost=cost,
                         variance_floor=floor)
        seg = res.segmentation
        if variance == "regime":
            s2 = np.maximum(res.sse / (res.weight * np.diff(seg.boundaries)), floor)
        else:
            s2 = np.full(seg.R, max(res.sse.sum() / (res.weight * m), floor))
        total_sse += res.sse.sum()
        clusters.append(PWRMCluster(seg, res.betas, s2))
    if variance == "shared":
        s = max(total_sse / (nk.sum() * m), floor)
        for c in clusters:
            c.sigma2s = np.full(c.R, s)
    return PWRMParams(alphas, clusters, degree, xs, variance, equal_proportions)


def _prepare(dataset: FunctionalDataset, K, R, degree, min_seg_len):
    dataset.require_common_grid("PWRM")
    if K < 1 or dataset.n < K:
        raise ConfigError(f"need 1 <= K <= n (K={K}, n={dataset.n})")
    if degree < 0:
        raise ConfigError("degree must be >= 0")
    xs, Y = dataset.grid(), dataset.matrix()
    Rs = _as_R_list(R, K)
    min_len = degree + 1 if min_seg_len is None else int(min_seg_len)
    if max(Rs) * min_len > len(xs):
        raise InfeasibleSegmentationError(f"{len(xs)} points cannot hold {max(Rs)} segments")
    return xs, Y, Rs, min_len


def _floor(Y, opts):
    if opts.variance_floor is not None:
        return opts.variance_floor
    v = float(np.var(Y))
    return 1e-6 * v if v > 0 else 1e-12


def fit_em_pwrm(dataset: FunctionalDataset, degree: int, K: int, R: Union[int, Sequence[int]],
                opts: Optional[FitOptions] = None, variance: str = "regime",
                min_seg_len: Optional[int] = None, init_labels=None):
    """EM for the piecewise regression mixture.

    Returns ``(PWRMParams, SoftPartition, FitReport)``; the objective trace
    is the observed-data log-likelihood.
    """
    opts = opts or FitOptions()
    xs, Y, Rs, min_len = _prepare(dataset, K, R, degree, min_seg_len)
    floor = _floor(Y, opts)

    def attempt(seed):
        labels = (np.asarray(init_labels) - 1 if init_labels is not None
                  else initial_labels(dataset, K, opts, np.random.default_rng(seed)))
        params = _m_step(xs, Y, one_hot(labels, K), Rs, degree, variance, floor, min_len)
        trace, conv = [], False
        for it in range(opts.max_iter):
            tau, ll = mixture_loglik(_component_logliks(Y, params) + np.log(params.alphas))
            trace.append(ll)
            if it > 0 and rel_change(ll, trace[-2]) < opts.tol:
                conv = True
                break
            params = _m_step(xs, Y, tau, Rs, degree, variance, floor, min_len)
        return params, tau, trace, conv, trace[-1]

    seed, (params, tau, trace, conv, ll) = run_restarts(attempt, opts)
    report = FitReport(objective_trace=trace, iterations=len(trace), converged=conv, final_K=K, seed=seed)
    report.criteria = evaluation.bic_aic_icl(ll, params, tau, dataset.n).to_dict()
    return params, SoftPartition(tau), report


def fit_cem_pwrm(dataset: FunctionalDataset, degree: int, K: int, R: Union[int, Sequence[int]],
                 opts: Optional[FitOptions] = None, constrained: bool = False, variance: str = "regime",
                 min_seg_len: Optional[int] = None, init_labels=None, max_repairs: int = 3):
    """Classification EM for the piecewise regression mixture.

    With ``constrained=True`` the model uses equal proportions, one variance
    shared by every regime of every cluster and piecewise constant regimes;
    the complete-data log-likelihood is then a decreasing affine function of
    the within-cluster, within-segment distortion.

    Returns ``(PWRMParams, HardPartition, FitReport)``; the objective trace is
    the complete-data log-likelihood.
    """
    opts = opts or FitOptions()
    if constrained:
        if degree != 0:
            raise ConfigError("constrained CEM uses piecewise constant regimes (degree=0)")
        variance = "shared"
    xs, Y, Rs, min_len = _prepare(dataset, K, R, degree, min_seg_len)
    floor = _floor(Y, opts)
    n = dataset.n

    def attempt(seed):
        labels = (np.asarray(init_labels) - 1 if init_labels is not None
                  else initial_labels(dataset, K, opts, np.random.default_rng(seed)))
        params = _m_step(xs, Y, one_hot(labels, K), Rs, degree, variance, floor, min_len, constrained)
        trace, conv, repairs = [], False, 0
        prev = labels
        for it in range(opts.max_iter):
            log_joint = _component_logliks(Y, params) + np.log(params.alphas)
            labels = np.argmax(log_joint, axis=1)
            counts = np.bincount(labels, minlength=K)
            while np.any(counts == 0):
                repairs += 1
                if repairs > max_repairs:
                    raise EmptyClusterError("empty cluster persisted after repairs")
                empty = int(np.flatnonzero(counts == 0)[0])
                big = int(np.argmax(counts))
                members = np.flatnonzero(labels == big)
                worst = members[np.argmin(log_joint[members, big])]
                labels[worst] = empty
                counts = np.bincount(labels, minlength=K)
                log.debug("CEM repair %d: curve %d moved to empty cluster %d", repairs, worst, empty)
            lc = float(log_joint[np.arange(n), labels].sum())
            trace.append(lc)
            if it > 0 and np.array_equal(labels, prev):
                conv = True
                break
            prev = labels
            params = _m_step(xs, Y, one_hot(labels, K), Rs, degree, variance, floor, min_len, constrained)
        return params, labels, trace, conv, repairs, trace[-1]

    seed, (params, labels, trace, conv, repairs, lc) = run_restarts(attempt, opts)
    tau_obs, ll = mixture_loglik(_component_logliks(Y, params) + np.log(params.alphas))
    report = FitReport(objective_trace=trace, iterations=len(trace), converged=conv, final_K=K, seed=seed,
                       objective="complete_loglik")
    report.extra = {"repairs": repairs, "distortion": distortion(Y, labels + 1, params)}
    report.criteria = evaluation.bic_aic_icl(ll, params, tau_obs, n).to_dict()
    return params, HardPartition(labels + 1, K), report


def distortion(Y: np.ndarray, labels, params: PWRMParams) -> float:
    """Within-cluster, within-segment squared distortion of a hard partition."""
    mu = params.mean_curves()
    labels = np.asarray(labels, dtype=int)
    return float(((Y - mu[labels - 1]) ** 2).sum())

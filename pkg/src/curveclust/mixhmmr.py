"""Mixture of hidden Markov model regressions.

Each cluster is an HMM whose hidden regimes emit polynomial regressions of
the response on the abscissa. Posteriors come from a scaled
forward-backward pass, vectorized over curves of equal length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import evaluation
from ._core import (ConfigError, CurveStack, DataError, DegenerateModelError, EmptyClusterError, FitOptions,
                    FitReport, LOG2PI, SoftPartition, mixture_loglik, rel_change,
                    solve_gram)
from .dataset import FunctionalDataset
from .mixreg import initial_labels, run_restarts

EMISSION_FLOOR = 1e-300


@dataclass
class MarkovChainParams:
    initial: np.ndarray      # (R,)
    transition: np.ndarray   # (R, R), row-stochastic
    left_right: bool = True

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        R = len(self.initial)
        if self.transition.shape != (R, R):
            raise ConfigError("transition matrix must be R x R")
        if abs(self.initial.sum() - 1) > 1e-12 or np.any(self.initial < 0):
            raise ConfigError("initial distribution must lie on the simplex")
        if np.any(np.abs(self.transition.sum(1) - 1) > 1e-12) or np.any(self.transition < 0):
            raise ConfigError("transition rows must be probability vectors")
        if self.left_right and np.any(np.tril(self.transition, -1) != 0):
            raise ConfigError("left-right chain has mass below the diagonal")

    @property
    def R(self) -> int:
        return len(self.initial)

    @classmethod
    def left_right_default(cls, R: int, stay: float = 0.9) -> "MarkovChainParams":
        A = np.eye(R) * stay + np.eye(R, k=1) * (1 - stay)
        A[-1, -1] = 1.0
        pi = np.zeros(R)
        pi[0] = 1.0
        return cls(pi, A, True)

    @classmethod
    def ergodic_default(cls, R: int, stay: float = 0.9) -> "MarkovChainParams":
        if R == 1:
            return cls(np.ones(1), np.ones((1, 1)), False)
        A = np.full((R, R), (1 - stay) / (R - 1))
        np.fill_diagonal(A, stay)
        return cls(np.full(R, 1.0 / R), A, False)

    def n_free_parameters(self) -> int:
        """Free entries of the chain; structural zeros do not count.

        A left-right chain starts in regime 1 with certainty and its rows
        only move mass between the diagonal and the next regime.
        """
        R = self.R
        if self.left_right:
            return R - 1
        return (R - 1) + R * (R - 1)


@dataclass
class HMMRComponent:
    chain: MarkovChainParams
    betas: np.ndarray     # (R, p)
    sigma2s: np.ndarray   # (R,)

    @property
    def R(self) -> int:
        return self.chain.R


@dataclass
class MixHMMRParams:
    alphas: np.ndarray
    components: list
    degree: int

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        if len(self.components) != len(self.alphas):
            raise ConfigError("one component per proportion is required")

    @property
    def K(self) -> int:
        return len(self.alphas)

    @property
    def p(self) -> int:
        return self.degree + 1

    def n_free_parameters(self) -> int:
        nu = self.K - 1
        for c in self.components:
            nu += c.R * self.p + c.R + c.chain.n_free_parameters()
        return nu

    def to_dict(self) -> dict:
        return {"family": "mixhmmr", "K": self.K, "degree": self.degree, "alphas": self.alphas.tolist(),
                "components": [{"initial": c.chain.initial.tolist(), "transition": c.chain.transition.tolist(),
                                "left_right": c.chain.left_right, "betas": c.betas.tolist(),
                                "sigma2s": c.sigma2s.tolist()} for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "MixHMMRParams":
        comps = [HMMRComponent(MarkovChainParams(c["initial"], c["transition"], bool(c["left_right"])),
                               np.array(c["betas"], dtype=float), np.array(c["sigma2s"], dtype=float))
                 for c in d["components"]]
        return cls(np.array(d["alphas"]), comps, int(d["degree"]))


@dataclass
class HmmPosteriors:
    gamma: np.ndarray   # (m, R)
    xi: np.ndarray      # (m-1, R, R)
    loglik: float


def poly_design(xs, degree: int) -> np.ndarray:
    return np.vander(np.asarray(xs, dtype=float), degree + 1, increasing=True)


def emission_logpdf(y, X, betas, sigma2s) -> np.ndarray:
    """``out[..., j, r] = log N(y_j; beta_r' x_j, sigma2_r)``."""
    mu = X @ betas.T
    return -0.5 * (LOG2PI + np.log(sigma2s) + (np.asarray(y)[..., None] - mu) ** 2 / sigma2s)


def forward_backward_batch(log_b: np.ndarray, initial: np.ndarray, transition: np.ndarray,
                           want_xi: bool = False):
    """Scaled forward-backward for N sequences of equal length.

    ``log_b`` is (N, m, R). Forward: each step's emissions are shifted by
    the largest predicted joint term over the regimes the chain can reach,
    so every scaling constant lies in [1, R] and the log-likelihood is the
    sum of their logs plus the shifts. Backward messages are renormalized
    to unit maximum at every step; gamma and xi only need their relative
    values at a given position. Reachable emissions are floored at 1e-300
    relative to the best reachable one.

    Returns ``gamma`` (N, m, R), the transition counts ``sum_j xi_j``
    (N, R, R), the log-likelihoods (N,) and, with ``want_xi``, the full
    (N, m-1, R, R) joint probabilities.
    """
    N, m, R = log_b.shape
    A = transition
    alpha = np.empty((N, m, R))
    e_back = np.empty((N, m, R))
    scale = np.empty((N, m))
    shift = np.empty((N, m))
    for j in range(m):
        pred = np.broadcast_to(initial, (N, R)) if j == 0 else alpha[:, j - 1] @ A
        reach = pred > 0
        lb = np.where(reach, log_b[:, j], -np.inf)
        with np.errstate(divide="ignore"):
            c = (np.log(pred) + lb).max(1)
        if not np.all(np.isfinite(c)):
            raise DegenerateModelError(f"zero emission mass at grid position {j}")
        e = np.where(reach, np.maximum(np.exp(np.minimum(lb - c[:, None], 700.0)), EMISSION_FLOOR), 0.0)
        a = pred * e
        s = a.sum(1)
        alpha[:, j] = a / s[:, None]
        scale[:, j] = s
        shift[:, j] = c
        top = lb.max(1, keepdims=True)
        e_back[:, j] = np.where(reach, np.maximum(np.exp(lb - top), EMISSION_FLOOR), 0.0)
    beta = np.empty((N, m, R))
    beta[:, -1] = 1.0
    for j in range(m - 2, -1, -1):
        raw = (e_back[:, j + 1] * beta[:, j + 1]) @ A.T
        beta[:, j] = raw / raw.max(1, keepdims=True)
    gamma = alpha * beta
    gamma /= gamma.sum(2, keepdims=True)
    nxt = e_back[:, 1:] * beta[:, 1:]
    xi = alpha[:, :-1, :, None] * A[None, None] * nxt[:, :, None, :]
    xi /= xi.sum((2, 3), keepdims=True)
    counts = xi.sum(1)
    loglik = (np.log(scale) + shift).sum(1)
    return gamma, counts, loglik, (xi if want_xi else None)


def forward_backward(curve, design, chain: MarkovChainParams, betas, sigma2s) -> HmmPosteriors:
    """Smoothed regime posteriors of one curve under one HMM regression."""
    y = np.asarray(getattr(curve, "ys", curve), dtype=float)
    X = np.asarray(design, dtype=float)
    if X.shape[0] != len(y):
        raise DataError("design rows must match the curve length")
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    sigma2s = np.asarray(sigma2s, dtype=float)
    if betas.shape[0] != chain.R or len(sigma2s) != chain.R:
        raise ConfigError("one regression per regime is required")
    log_b = emission_logpdf(y, X, betas, sigma2s)[None]
    gamma, _, ll, xi = forward_backward_batch(log_b, chain.initial, chain.transition, want_xi=True)
    return HmmPosteriors(gamma[0], xi[0], float(ll[0]))


class _Groups:
    """Curves bucketed by length so forward-backward runs batched."""

    def __init__(self, dataset: FunctionalDataset, degree: int):
        self.stack = CurveStack([c.ys for c in dataset.curves],
                                [poly_design(c.xs, degree) for c in dataset.curves])
        self.n = dataset.n
        self.groups = []
        lengths = self.stack.lengths
        for L in np.unique(lengths):
            idx = np.flatnonzero(lengths == L)
            rows = (self.stack.starts[idx][:, None] + np.arange(L)[None, :])
            self.groups.append((idx, rows))

    def posteriors(self, comp: HMMRComponent):
        """(per-curve loglik (n,), stacked gamma (Npts, R), per-curve xi counts (n, R, R))."""
        st = self.stack
        R = comp.R
        log_b_all = emission_logpdf(st.y, st.X, comp.betas, comp.sigma2s)
        ll = np.empty(self.n)
        gamma = np.empty((len(st.y), R))
        counts = np.empty((self.n, R, R))
        for idx, rows in self.groups:
            g, c, l, _ = forward_backward_batch(log_b_all[rows], comp.chain.initial, comp.chain.transition)
            ll[idx] = l
            gamma[rows.ravel()] = g.reshape(-1, R)
            counts[idx] = c
        return ll, gamma, counts


def _e_step(groups: _Groups, params: MixHMMRParams):
    stats = [groups.posteriors(c) for c in params.components]
    ll = np.column_stack([s[0] for s in stats])
    tau, total = mixture_loglik(ll + np.log(params.alphas))
    return tau, total, stats


def _m_step(groups: _Groups, tau, stats, params: MixHMMRParams, floor: float, ridge: float) -> MixHMMRParams:
    st = groups.stack
    n, K = tau.shape
    nk = tau.sum(0)
    if np.any(nk < 1.0 / n ** 2):
        raise EmptyClusterError(f"cluster(s) {np.flatnonzero(nk < 1.0 / n ** 2).tolist()} lost all weight")
    comps = []
    for k, comp in enumerate(params.components):
        _, gamma, counts = stats[k]
        first = gamma[st.starts]                                  # (n, R)
        pi = tau[:, k] @ first / nk[k]
        pi = pi / pi.sum()
        num = np.einsum("i,ilr->lr", tau[:, k], counts)
        rows = num.sum(1)
        A = comp.chain.transition.copy()
        ok = rows > 0
        A[ok] = num[ok] / rows[ok, None]
        if comp.chain.left_right:
            # structural zeros stay exactly zero
            A = np.where(comp.chain.transition > 0, A, 0.0)
            A /= A.sum(1, keepdims=True)
            pi = np.where(comp.chain.initial > 0, pi, 0.0)
            pi /= pi.sum()
        W = tau[st.owner, k][:, None] * gamma                     # (Npts, R)
        G = np.einsum("nr,np,nq->rpq", W, st.X, st.X)
        b = np.einsum("nr,np,n->rp", W, st.X, st.y)
        betas = solve_gram(G, b, ridge)
        resid2 = (st.y[:, None] - st.X @ betas.T) ** 2
        wsum = W.sum(0)
        with np.errstate(invalid="ignore", divide="ignore"):
            s2 = np.where(wsum > 0, (W * resid2).sum(0) / wsum, floor)
        comps.append(HMMRComponent(MarkovChainParams(pi, A, comp.chain.left_right), betas,
                                   np.maximum(s2, floor)))
    return MixHMMRParams(nk / n, comps, params.degree)


def _initial_params(groups: _Groups, labels, Rs, degree, left_right, floor, ridge) -> MixHMMRParams:
    """Regressions fitted on equal R-way index splits of each cluster's curves."""
    st = groups.stack
    K = len(Rs)
    pos = np.arange(len(st.y)) - np.repeat(st.starts, st.lengths)
    frac = pos / np.repeat(st.lengths, st.lengths)
    comps = []
    for k in range(K):
        R = Rs[k]
        member = labels[st.owner] == k
        piece = np.minimum((frac * R).astype(int), R - 1)
        betas, s2 = [], []
        for r in range(R):
            sel = member & (piece == r)
            X, y = st.X[sel], st.y[sel]
            beta = solve_gram(X.T @ X, X.T @ y, ridge) if len(y) else np.zeros(st.p)
            betas.append(beta)
            s2.append(max(float(np.mean((y - X @ beta) ** 2)) if len(y) else 1.0, floor))
        chain = (MarkovChainParams.left_right_default(R) if left_right else MarkovChainParams.ergodic_default(R))
        comps.append(HMMRComponent(chain, np.array(betas), np.array(s2)))
    alphas = np.bincount(labels, minlength=K) / len(labels)
    return MixHMMRParams(alphas, comps, degree)


def fit_em_mixhmmr(dataset: FunctionalDataset, degree: int, K: int, R: Union[int, Sequence[int]],
                   opts: Optional[FitOptions] = None, left_right: bool = True, init_labels=None):
    """EM for the mixture of HMM regressions.

    Returns ``(MixHMMRParams, SoftPartition, FitReport)``; the trace holds
    the observed-data log-likelihood at each E-step.
    """
    opts = opts or FitOptions()
    if K < 1 or dataset.n < K:
        raise ConfigError(f"need 1 <= K <= n (K={K}, n={dataset.n})")
    if degree < 0:
        raise ConfigError("degree must be >= 0")
    Rs = [int(R)] * K if isinstance(R, (int, np.integer)) else [int(r) for r in R]
    if len(Rs) != K or min(Rs) < 1:
        raise ConfigError("R must be a positive integer or one per cluster")
    groups = _Groups(dataset, degree)
    floor = opts.variance_floor if opts.variance_floor is not None else groups.stack.default_floor()

    def attempt(seed):
        labels = (np.asarray(init_labels) - 1 if init_labels is not None
                  else initial_labels(dataset, K, opts, np.random.default_rng(seed)))
        params = _initial_params(groups, labels, Rs, degree, left_right, floor, opts.ridge)
        trace, conv = [], False
        for it in range(opts.max_iter):
            tau, ll, stats = _e_step(groups, params)
            trace.append(ll)
            if it > 0 and rel_change(ll, trace[-2]) < opts.tol:
                conv = True
                break
            params = _m_step(groups, tau, stats, params, floor, opts.ridge)
        return params, tau, trace, conv, trace[-1]

    seed, (params, tau, trace, conv, ll) = run_restarts(attempt, opts)
    report = FitReport(objective_trace=trace, iterations=len(trace), converged=conv, final_K=K, seed=seed)
    report.criteria = evaluation.bic_aic_icl(ll, params, tau, dataset.n).to_dict()
    return params, SoftPartition(tau), report


def cluster_state_profiles(dataset: FunctionalDataset, params: MixHMMRParams, tau):
    """Tau-weighted average smoothed regime probabilities per cluster.

    Posteriors of observations sharing an abscissa are pooled, so the
    result is defined on the sorted distinct abscissas ``ux`` of the whole
    dataset (the grid itself when it is common). Returns ``(ux, profiles)``
    with one (len(ux), R_k) array per cluster.
    """
    groups = _Groups(dataset, params.degree)
    st = groups.stack
    x = np.concatenate([c.xs for c in dataset.curves])
    ux, inv = np.unique(x, return_inverse=True)
    tau = np.asarray(tau, dtype=float)
    out = []
    for k, comp in enumerate(params.components):
        _, gamma, _ = groups.posteriors(comp)
        w = tau[st.owner, k]
        if w.sum() <= 0:
            w = np.ones_like(w)
        num = np.zeros((len(ux), comp.R))
        np.add.at(num, inv, w[:, None] * gamma)
        den = np.zeros(len(ux))
        np.add.at(den, inv, w)
        out.append(num / np.where(den > 0, den, 1.0)[:, None])
    return ux, out


def hmmr_mean_curve(component: HMMRComponent, design, gamma_bar) -> np.ndarray:
    """``yhat_j = sum_r gamma_bar[j, r] * beta_r' x_j``."""
    return np.sum(np.asarray(gamma_bar) * (np.asarray(design) @ component.betas.T), axis=1)


def regime_segmentation(gamma_bar) -> np.ndarray:
    """MAP regime (1-based) at every grid point of an averaged posterior profile."""
    return np.argmax(np.asarray(gamma_bar), axis=1) + 1

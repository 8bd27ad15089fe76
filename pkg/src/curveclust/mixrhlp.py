"""Regression with a hidden logistic process (RHLP) and its mixture (MixRHLP).

Regime probabilities are a softmax of linear functions of the abscissa, so
the regime posteriors of each observation are available in closed form and
no forward-backward recursion is needed. The logistic weights are fitted by
a multi-class Newton (IRLS) solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from . import evaluation
from ._core import (ConfigError, CurveStack, DataError, EmptyClusterError, FitOptions, FitReport, LOG2PI,
                    SoftPartition, log, mixture_loglik, rel_change, solve_gram)
from .dataset import FunctionalDataset
from .mixhmmr import poly_design
from .mixreg import initial_labels, run_restarts


@dataclass
class LogisticProcessParams:
    """``w[r] = (w_r0, w_r1)`` for r < R; the last regime's pair is the null vector."""

    w: np.ndarray  # (R-1, 2)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(-1, 2)

    @property
    def R(self) -> int:
        return self.w.shape[0] + 1

    def full(self) -> np.ndarray:
        return np.vstack([self.w, np.zeros((1, 2))])

    @classmethod
    def zeros(cls, R: int) -> "LogisticProcessParams":
        return cls(np.zeros((R - 1, 2)))


def logistic_log_proportions(x, w: LogisticProcessParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    W = w.full()
    eta = W[:, 0] + np.multiply.outer(x, W[:, 1])
    eta = eta - eta.max(axis=-1, keepdims=True)
    return eta - np.log(np.exp(eta).sum(axis=-1, keepdims=True))


def logistic_proportions(x, w: LogisticProcessParams) -> np.ndarray:
    """Softmax-linear regime probabilities; shape ``x.shape + (R,)``."""
    x = np.asarray(x, dtype=float)
    W = w.full()
    eta = W[:, 0] + np.multiply.outer(x, W[:, 1])
    eta = eta - eta.max(axis=-1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=-1, keepdims=True)


def multinomial_objective(xs, targets, w: LogisticProcessParams) -> float:
    """``sum_j sum_r t_jr log pi_r(x_j; w)``."""
    return float(np.sum(np.asarray(targets) * logistic_log_proportions(xs, w)))


def multinomial_gradient(xs, targets, w: LogisticProcessParams) -> np.ndarray:
    """Gradient with respect to the free pairs, shape (R-1, 2)."""
    xs = np.asarray(xs, dtype=float)
    t = np.asarray(targets, dtype=float)
    pi = logistic_proportions(xs, w)
    mass = t.sum(1)
    resid = (t - mass[:, None] * pi)[:, :-1]
    phi = np.column_stack([np.ones_like(xs), xs])
    return resid.T @ phi


def _hessian(xs, targets, w):
    """Hessian of the objective (negative semi-definite), flattened over (r, feature)."""
    xs = np.asarray(xs, dtype=float)
    pi = logistic_proportions(xs, w)[:, :-1]
    mass = np.asarray(targets).sum(1)
    phi = np.column_stack([np.ones_like(xs), xs])
    Rm = pi.shape[1]
    # -sum_j mass_j (diag(pi_j) - pi_j pi_j') kron phi_j phi_j'
    cov = np.einsum("jr,rs->jrs", pi, np.eye(Rm)) - np.einsum("jr,js->jrs", pi, pi)
    H = -np.einsum("j,jrs,ja,jb->rasb", mass, cov, phi, phi)
    return H.reshape(Rm * 2, Rm * 2)


@dataclass
class IrlsResult:
    params: LogisticProcessParams
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    separated: bool = False


def irls_multiclass(xs, targets, init: Optional[LogisticProcessParams] = None, max_iter: int = 50,
                    grad_tol: float = 1e-8, ridge: float = 1e-8, max_halvings: int = 20) -> IrlsResult:
    """Newton ascent on the weighted multinomial log-likelihood.

    Each step solves ``(-H + ridge I) d = g`` and is halved until the
    objective does not decrease. When no halving helps, or the regularized
    Hessian is not positive definite, the last iterate is returned with
    ``separated=True``.
    """
    xs = np.asarray(xs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[0] != len(xs):
        raise DataError("targets must be an (m, R) matrix")
    R = targets.shape[1]
    w = LogisticProcessParams(np.zeros((R - 1, 2))) if init is None else LogisticProcessParams(init.w.copy())
    if w.R != R:
        raise ConfigError("initial weights do not match the number of regimes")
    res = IrlsResult(w)
    if R == 1:
        res.converged = True
        return res
    obj = multinomial_objective(xs, targets, w)
    res.objective_trace.append(obj)
    for it in range(max_iter):
        g = multinomial_gradient(xs, targets, w).ravel()
        if np.linalg.norm(g) < grad_tol:
            res.converged = True
            break
        M = -_hessian(xs, targets, w) + ridge * np.eye(len(g))
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            res.separated = True
            break
        d = np.linalg.solve(L.T, np.linalg.solve(L, g))
        # Newton decrement: predicted gain is twice g.d / 2; below roundoff we are done
        if g @ d <= 1e-13 * max(1.0, abs(obj)):
            res.converged = True
            break
        step = 1.0
        for _ in range(max_halvings + 1):
            cand = LogisticProcessParams(w.w + step * d.reshape(-1, 2))
            new = multinomial_objective(xs, targets, cand)
            if new >= obj:
                break
            step *= 0.5
        else:
            res.separated = True
            break
        improvement = new - obj
        w, obj = cand, new
        res.objective_trace.append(obj)
        res.iterations = it + 1
        if improvement <= 1e-15 * max(1.0, abs(obj)):
            res.converged = True
            break
    res.params = w
    return res


@dataclass
class RHLPParams:
    logistic: LogisticProcessParams
    betas: np.ndarray      # (R, p)
    sigma2s: np.ndarray    # (R,)

    def __post_init__(self):
        self.betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        self.sigma2s = np.asarray(self.sigma2s, dtype=float)
        if self.betas.shape[0] != self.logistic.R or len(self.sigma2s) != self.logistic.R:
            raise ConfigError("one regression per regime is required")
        if np.any(self.sigma2s <= 0):
            raise ConfigError("variances must be positive")

    @property
    def R(self) -> int:
        return self.logistic.R

    @property
    def degree(self) -> int:
        return self.betas.shape[1] - 1

    def n_free_parameters(self) -> int:
        p = self.betas.shape[1]
        return self.R * p + self.R + 2 * (self.R - 1)

    def to_dict(self) -> dict:
        return {"family": "rhlp", "degree": self.degree, "R": self.R, "w": self.logistic.w.tolist(),
                "betas": self.betas.tolist(), "sigma2s": self.sigma2s.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RHLPParams":
        R = len(d["sigma2s"])
        w = np.array(d["w"], dtype=float).reshape(R - 1, 2)
        return cls(LogisticProcessParams(w), np.array(d["betas"], dtype=float), np.array(d["sigma2s"], dtype=float))


@dataclass
class MixRHLPParams:
    alphas: np.ndarray
    components: list

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        if len(self.components) != len(self.alphas):
            raise ConfigError("one component per proportion is required")

    @property
    def K(self) -> int:
        return len(self.alphas)

    @property
    def degree(self) -> int:
        return self.components[0].degree

    def n_free_parameters(self) -> int:
        return self.K - 1 + sum(c.n_free_parameters() for c in self.components)

    def to_dict(self) -> dict:
        return {"family": "mixrhlp", "K": self.K, "degree": self.degree, "alphas": self.alphas.tolist(),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "MixRHLPParams":
        return cls(np.array(d["alphas"]), [RHLPParams.from_dict(c) for c in d["components"]])


def rhlp_point_logjoint(y, X, xs, comp: RHLPParams) -> np.ndarray:
    """``log pi_r(x_j) + log N(y_j; beta_r' x_j, sigma2_r)`` per observation and regime."""
    mu = X @ comp.betas.T
    logn = -0.5 * (LOG2PI + np.log(comp.sigma2s) + (np.asarray(y)[:, None] - mu) ** 2 / comp.sigma2s)
    return logistic_log_proportions(xs, comp.logistic) + logn


def rhlp_loglik(curve, comp: RHLPParams) -> float:
    """Log-density of one curve under an RHLP."""
    X = poly_design(curve.xs, comp.degree)
    return float(logsumexp(rhlp_point_logjoint(curve.ys, X, curve.xs, comp), axis=1).sum())


def rhlp_mean_curve(params: RHLPParams, design, xs) -> np.ndarray:
    """``yhat_j = sum_r pi_r(x_j; w) beta_r' x_j``."""
    return np.sum(logistic_proportions(xs, params.logistic) * (np.asarray(design) @ params.betas.T), axis=1)


class _Data:
    def __init__(self, dataset: FunctionalDataset, degree: int):
        self.stack = CurveStack([c.ys for c in dataset.curves],
                                [poly_design(c.xs, degree) for c in dataset.curves])
        self.x = np.concatenate([c.xs for c in dataset.curves])
        self.n = dataset.n
        # IRLS targets only depend on x, so observations sharing an abscissa are pooled
        self.ux, self.inv = np.unique(self.x, return_inverse=True)

    def component_stats(self, comp: RHLPParams):
        """(per-curve loglik (n,), stacked regime posteriors (Npts, R))."""
        lj = rhlp_point_logjoint(self.stack.y, self.stack.X, self.x, comp)
        top = lj.max(1)
        lse = top + np.log(np.exp(lj - top[:, None]).sum(1))
        return self.stack.per_curve(lse), np.exp(lj - lse[:, None])

    def pooled_targets(self, weights: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.ux), weights.shape[1]))
        np.add.at(out, self.inv, weights)
        return out


def _e_step(data: _Data, params: MixRHLPParams):
    stats = [data.component_stats(c) for c in params.components]
    ll = np.column_stack([s[0] for s in stats])
    tau, total = mixture_loglik(ll + np.log(params.alphas))
    return tau, total, [s[1] for s in stats]


def _m_step(data: _Data, tau, gammas, params: MixRHLPParams, floor: float, ridge: float, irls_log: list):
    st = data.stack
    n, K = tau.shape
    nk = tau.sum(0)
    if np.any(nk < 1.0 / n ** 2):
        raise EmptyClusterError(f"cluster(s) {np.flatnonzero(nk < 1.0 / n ** 2).tolist()} lost all weight")
    comps = []
    for k, comp in enumerate(params.components):
        W = tau[st.owner, k][:, None] * gammas[k]
        G = np.einsum("nr,np,nq->rpq", W, st.X, st.X)
        b = np.einsum("nr,np,n->rp", W, st.X, st.y)
        betas = solve_gram(G, b, ridge)
        resid2 = (st.y[:, None] - st.X @ betas.T) ** 2
        wsum = W.sum(0)
        with np.errstate(invalid="ignore", divide="ignore"):
            s2 = np.where(wsum > 0, (W * resid2).sum(0) / wsum, floor)
        irls = irls_multiclass(data.ux, data.pooled_targets(W), comp.logistic, ridge=ridge)
        irls_log.append({"iterations": irls.iterations, "converged": irls.converged, "separated": irls.separated})
        comps.append(RHLPParams(irls.params, betas, np.maximum(s2, floor)))
    return MixRHLPParams(nk / n, comps)


def _initial_params(data: _Data, labels, Rs, floor, ridge) -> MixRHLPParams:
    """w = 0; regressions fitted on an equal R-way split of the abscissa range."""
    st = data.stack
    lo, hi = data.x.min(), data.x.max()
    frac = (data.x - lo) / (hi - lo) if hi > lo else np.zeros_like(data.x)
    comps = []
    for k, R in enumerate(Rs):
        member = labels[st.owner] == k
        piece = np.minimum((frac * R).astype(int), R - 1)
        betas, s2 = [], []
        for r in range(R):
            sel = member & (piece == r)
            X, y = st.X[sel], st.y[sel]
            beta = solve_gram(X.T @ X, X.T @ y, ridge) if len(y) else np.zeros(st.p)
            betas.append(beta)
            s2.append(max(float(np.mean((y - X @ beta) ** 2)) if len(y) else 1.0, floor))
        comps.append(RHLPParams(LogisticProcessParams.zeros(R), np.array(betas), np.array(s2)))
    return MixRHLPParams(np.bincount(labels, minlength=len(Rs)) / len(labels), comps)


def sort_regimes(comp: RHLPParams, xs) -> RHLPParams:
    """Relabel regimes by the abscissa at which their proportion peaks."""
    pi = logistic_proportions(np.asarray(xs, dtype=float), comp.logistic)
    order = np.argsort(np.asarray(xs)[np.argmax(pi, axis=0)], kind="stable")
    W = comp.logistic.full()[order]
    W = W - W[-1]
    return RHLPParams(LogisticProcessParams(W[:-1]), comp.betas[order], comp.sigma2s[order])


def _regime_list(R, K):
    Rs = [int(R)] * K if isinstance(R, (int, np.integer)) else [int(r) for r in R]
    if len(Rs) != K or min(Rs) < 1:
        raise ConfigError("R must be a positive integer or one per cluster")
    return Rs


def fit_em_mixrhlp(dataset: FunctionalDataset, degree: int, K: int, R: Union[int, Sequence[int]],
                   opts: Optional[FitOptions] = None, init_labels=None):
    """EM for the mixture of RHLP models.

    Returns ``(MixRHLPParams, SoftPartition, FitReport)``. Regimes of each
    component are reported sorted by the location of their proportion peak.
    """
    opts = opts or FitOptions()
    if K < 1 or dataset.n < K:
        raise ConfigError(f"need 1 <= K <= n (K={K}, n={dataset.n})")
    if degree < 0:
        raise ConfigError("degree must be >= 0")
    Rs = _regime_list(R, K)
    data = _Data(dataset, degree)
    floor = opts.variance_floor if opts.variance_floor is not None else data.stack.default_floor()

    def attempt(seed):
        labels = (np.asarray(init_labels) - 1 if init_labels is not None
                  else initial_labels(dataset, K, opts, np.random.default_rng(seed)))
        params = _initial_params(data, labels, Rs, floor, opts.ridge)
        trace, conv, irls_log = [], False, []
        for it in range(opts.max_iter):
            tau, ll, gammas = _e_step(data, params)
            trace.append(ll)
            if it > 0 and rel_change(ll, trace[-2]) < opts.tol:
                conv = True
                break
            params = _m_step(data, tau, gammas, params, floor, opts.ridge, irls_log)
        return params, tau, gammas, trace, conv, irls_log, trace[-1]

    seed, (params, tau, gammas, trace, conv, irls_log, ll) = run_restarts(attempt, opts)
    params = MixRHLPParams(params.alphas, [sort_regimes(c, data.ux) for c in params.components])
    report = FitReport(objective_trace=trace, iterations=len(trace), converged=conv, final_K=K, seed=seed)
    report.criteria = evaluation.bic_aic_icl(ll, params, tau, dataset.n).to_dict()
    empty = [[int(r) for r in np.flatnonzero(g.max(0) < 1e-3)] for g in gammas]
    if any(empty):
        log.warning("regimes with negligible posterior mass: %s", empty)
    report.extra = {"empty_regimes": empty, "irls_separated": sum(e["separated"] for e in irls_log)}
    return params, SoftPartition(tau), report


def fit_rhlp(dataset: FunctionalDataset, degree: int, R: int, opts: Optional[FitOptions] = None):
    """Single RHLP fitted to a homogeneous group of curves.

    Returns ``(RHLPParams, regime posteriors, FitReport)`` where the
    posteriors are a list of (m_i, R) arrays, one per curve, with regimes
    in the reported (sorted) order.
    """
    params, _, report = fit_em_mixrhlp(dataset, degree, 1, R, opts)
    comp = params.components[0]
    return comp, regime_posteriors(dataset, comp), report


def regime_posteriors(dataset: FunctionalDataset, comp: RHLPParams) -> list:
    out = []
    for c in dataset.curves:
        lj = rhlp_point_logjoint(c.ys, poly_design(c.xs, comp.degree), c.xs, comp)
        out.append(np.exp(lj - logsumexp(lj, axis=1, keepdims=True)))
    return out


def mixrhlp_loglik_matrix(dataset: FunctionalDataset, params: MixRHLPParams) -> np.ndarray:
    """(n, K) component log-densities."""
    data = _Data(dataset, params.degree)
    return np.column_stack([data.component_stats(c)[0] for c in params.components])

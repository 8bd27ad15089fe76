"""Gaussian regression mixtures for curve clustering.

Each curve ``y_i`` is modelled as ``sum_k alpha_k N(y_i; X_i beta_k, sigma2_k I)``
with ``X_i`` a polynomial, spline or B-spline design. ``fit_em`` is the
standard EM; ``fit_robust_em`` maximizes the entropy-penalized
log-likelihood starting from one component per curve and discards
components as their proportions vanish.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import evaluation
from ._core import (CurveStack, DegenerateModelError, EmptyClusterError, ConfigError, DataError,
                    FitOptions, FitReport, SoftPartition, LOG2PI, child_seeds, gaussian_logpdf,
                    kmeans_partition, log, mixture_loglik, one_hot, random_partition, rel_change, solve_gram)
from .basis import BasisSpec, build_design
from .dataset import Curve, FunctionalDataset


@dataclass
class MixRegParams:
    alphas: np.ndarray
    betas: np.ndarray  # (K, p)
    sigma2s: np.ndarray
    basis: Optional[BasisSpec] = None

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        self.sigma2s = np.asarray(self.sigma2s, dtype=float)
        K = len(self.alphas)
        if self.betas.shape[0] != K or self.sigma2s.shape != (K,):
            raise ConfigError("alphas, betas and sigma2s disagree on K")
        if abs(self.alphas.sum() - 1.0) > 1e-9 or np.any(self.alphas <= 0):
            raise ConfigError("alphas must lie in the open simplex")
        if np.any(self.sigma2s <= 0):
            raise ConfigError("variances must be positive")

    @property
    def K(self) -> int:
        return len(self.alphas)

    @property
    def p(self) -> int:
        return self.betas.shape[1]

    def n_free_parameters(self) -> int:
        return (self.K - 1) + self.K * self.p + self.K

    def mean_curves(self, xs) -> np.ndarray:
        """(K, len(xs)) fitted cluster mean curves."""
        if self.basis is None:
            raise ConfigError("parameters carry no basis")
        return self.betas @ build_design(xs, self.basis).T

    def to_dict(self) -> dict:
        return {"family": "mixreg", "basis": self.basis.to_dict() if self.basis else None,
                "K": self.K, "alphas": self.alphas.tolist(), "betas": self.betas.tolist(),
                "sigma2s": self.sigma2s.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixRegParams":
        basis = BasisSpec.from_dict(d["basis"]) if d.get("basis") else None
        return cls(np.array(d["alphas"]), np.array(d["betas"]), np.array(d["sigma2s"]), basis)


def designs_for(dataset: FunctionalDataset, basis: BasisSpec) -> tuple:
    """Design matrices for every curve, knots placed over the pooled domain.

    Returns ``(designs, resolved_basis)`` where the resolved basis carries
    explicit knot positions.
    """
    resolved = basis.resolved(np.concatenate([c.xs for c in dataset.curves]))
    if dataset.common_grid:
        X = build_design(dataset.curves[0].xs, resolved)
        return [X] * dataset.n, resolved
    return [build_design(c.xs, resolved) for c in dataset.curves], resolved


def component_loglik(curve, beta, sigma2: float, design) -> float:
    """``sum_j log N(y_j; design_j . beta, sigma2)`` for one curve."""
    ys = curve.ys if isinstance(curve, Curve) else np.asarray(curve, dtype=float)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    beta = np.asarray(beta, dtype=float)
    if design.shape[0] != len(ys) or design.shape[1] != len(beta):
        raise DataError(f"dimension mismatch: design {design.shape}, y {len(ys)}, beta {len(beta)}")
    if not sigma2 > 0:
        raise ConfigError("sigma2 must be positive")
    r2 = (ys - design @ beta) ** 2
    return float(gaussian_logpdf(r2, sigma2).sum())


class _Problem:
    """Curve stack plus per-curve Gram blocks, shared by every EM iteration."""

    def __init__(self, ys, designs):
        self.stack = CurveStack(ys, designs)
        st = self.stack
        self.n = st.n
        self.m = st.lengths.astype(float)
        self.gram = np.einsum("np,nq->npq", st.X, st.X)
        self.gram = np.add.reduceat(self.gram, st.starts, axis=0)       # (n, p, p)
        self.xty = st.per_curve(st.X * st.y[:, None])                     # (n, p)

    def logliks(self, betas: np.ndarray, sigma2s: np.ndarray) -> np.ndarray:
        """(n, K) component log-densities."""
        st = self.stack
        resid2 = (st.y[:, None] - st.X @ betas.T) ** 2
        sse = st.per_curve(resid2)
        return -0.5 * (self.m[:, None] * (LOG2PI + np.log(sigma2s))[None, :] + sse / sigma2s[None, :])

    def weighted_fit(self, tau: np.ndarray, floor: float, ridge: float):
        """tau-weighted least squares for all components at once."""
        st = self.stack
        G = np.einsum("ik,ipq->kpq", tau, self.gram)
        b = tau.T @ self.xty
        betas = solve_gram(G, b, ridge)
        resid2 = (st.y[:, None] - st.X @ betas.T) ** 2
        sse = st.per_curve(resid2)
        denom = tau.T @ self.m
        sigma2s = np.maximum((tau * sse).sum(0) / denom, floor)
        return betas, sigma2s


def _problem_for(dataset: FunctionalDataset, designs) -> _Problem:
    return _Problem([c.ys for c in dataset.curves], designs)


def _floor(problem: _Problem, opts: FitOptions) -> float:
    return opts.variance_floor if opts.variance_floor is not None else problem.stack.default_floor()


def _e_step(problem: _Problem, params: MixRegParams):
    log_joint = problem.logliks(params.betas, params.sigma2s) + np.log(params.alphas)[None, :]
    return mixture_loglik(log_joint)


def _m_step(problem: _Problem, tau: np.ndarray, floor: float, ridge: float,
            basis: Optional[BasisSpec] = None) -> MixRegParams:
    n = problem.n
    nk = tau.sum(0)
    if np.any(nk < 1.0 / n ** 2):
        raise EmptyClusterError(f"component(s) {np.flatnonzero(nk < 1.0 / n ** 2).tolist()} lost all weight")
    betas, sigma2s = problem.weighted_fit(tau, floor, ridge)
    return MixRegParams(nk / n, betas, sigma2s, basis)


def e_step(dataset: FunctionalDataset, params: MixRegParams, designs):
    """Posterior memberships and observed-data log-likelihood."""
    tau, ll = _e_step(_problem_for(dataset, designs), params)
    return SoftPartition(tau), ll


def m_step(dataset: FunctionalDataset, tau, designs, opts: Optional[FitOptions] = None) -> MixRegParams:
    opts = opts or FitOptions()
    problem = _problem_for(dataset, designs)
    tau = tau.tau if isinstance(tau, SoftPartition) else np.asarray(tau, dtype=float)
    return _m_step(problem, tau, _floor(problem, opts), opts.ridge)


def initial_labels(dataset, K, opts, rng) -> np.ndarray:
    """0-based starting partition drawn according to ``opts.init``."""
    if opts.init == "kmeans_partition":
        dataset.require_common_grid("kmeans_partition init")
        return kmeans_partition(dataset.matrix(), K, rng)
    return random_partition(dataset.n, K, rng)


def _initial_tau(dataset, K, opts, rng):
    return one_hot(initial_labels(dataset, K, opts, rng), K)


def _run_em(problem, params, opts, floor, basis, trace=None):
    trace = [] if trace is None else trace
    converged = False
    for it in range(opts.max_iter):
        tau, ll = _e_step(problem, params)
        trace.append(ll)
        if it > 0 and rel_change(ll, trace[-2]) < opts.tol:
            converged = True
            break
        params = _m_step(problem, tau, floor, opts.ridge, basis)
    return params, tau, trace, converged


def run_restarts(attempt: Callable[[int], tuple], opts: FitOptions, score=lambda res: res[-1]):
    """Run ``attempt(seed)`` for each restart seed and keep the best by ``score``.

    Failed restarts (degenerate models) are skipped; if all fail the last
    error propagates.
    """
    seeds = child_seeds(opts.seed, opts.n_init)
    errors = []

    def safe(seed):
        try:
            return attempt(seed)
        except DegenerateModelError as exc:
            errors.append(exc)
            log.debug("restart with seed %s failed: %s", seed, exc)
            return None

    if opts.threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(safe, seeds))
    else:
        results = [safe(s) for s in seeds]
    ok = [(s, r) for s, r in zip(seeds, results) if r is not None]
    if not ok:
        raise DegenerateModelError(f"all {len(seeds)} restarts failed; last error: {errors[-1]}")
    best_seed, best = ok[0]
    for s, r in ok[1:]:
        if score(r) > score(best):
            best_seed, best = s, r
    return best_seed, best


def fit_em(dataset: FunctionalDataset, basis: BasisSpec, K: int, opts: Optional[FitOptions] = None,
           init_params: Optional[MixRegParams] = None):
    """EM for a K-component regression mixture.

    Returns ``(params, SoftPartition, FitReport)``; the best of ``n_init``
    random restarts by final log-likelihood is kept.
    """
    opts = opts or FitOptions()
    if K < 1 or dataset.n < K:
        raise ConfigError(f"need 1 <= K <= n (K={K}, n={dataset.n})")
    designs, resolved = designs_for(dataset, basis)
    problem = _problem_for(dataset, designs)
    floor = _floor(problem, opts)

    def attempt(seed):
        if init_params is not None:
            params = init_params
        else:
            tau0 = _initial_tau(dataset, K, opts, np.random.default_rng(seed))
            params = _m_step(problem, tau0, floor, opts.ridge, resolved)
        params, tau, trace, conv = _run_em(problem, params, opts, floor, resolved)
        return params, tau, trace, conv, trace[-1]

    seed, (params, tau, trace, conv, ll) = run_restarts(attempt, opts)
    params.basis = resolved
    report = FitReport(objective_trace=trace, iterations=len(trace), converged=conv, final_K=params.K,
                       seed=seed)
    report.criteria = evaluation.bic_aic_icl(ll, params, tau, dataset.n).to_dict()
    return params, SoftPartition(tau), report


def penalized_objective(loglik: float, alphas, n: int, lam: float) -> float:
    """``loglik - lam * H(Z)`` with total entropy ``H = -n sum_k a_k log a_k``."""
    a = np.asarray(alphas, dtype=float)
    a = a[a > 0]
    H = -n * float(np.sum(a * np.log(a)))
    return loglik - lam * H


def default_lambda(q: int, n: int) -> float:
    """Ramp schedule: grows linearly over 10 iterations to ``1 / log n``."""
    return min(1.0, q / 10.0) / np.log(n)


def adaptive_lambda(alphas_new: np.ndarray, alphas_old: np.ndarray, a_em: np.ndarray,
                    eta: float, n: int) -> float:
    """Penalty that stays near 1 while proportions are stable.

    The first term shrinks when proportions move a lot; the second keeps
    the largest proportion from overshooting.
    """
    K = len(alphas_new)
    move = np.sum(np.exp(-eta * n * np.abs(alphas_new - alphas_old))) / K
    E = float(np.sum(alphas_old * np.log(alphas_old)))
    if E >= 0:
        return float(move)
    bound = (1.0 - a_em.max()) / (-alphas_old.max() * E)
    return float(min(move, bound))


@dataclass
class RobustOptions(FitOptions):
    lam: Optional[float] = None          # constant penalty, overrides the schedule
    schedule: str = "adaptive"           # "adaptive" or "ramp"
    discard: bool = True
    min_stable_iter: int = 10            # K must stay constant this long before stopping
    freeze_after: int = 60               # adaptive: penalty drops to 0 once K is stable this long

    def __post_init__(self):
        super().__post_init__()
        if self.schedule not in ("adaptive", "ramp"):
            raise ConfigError(f"unknown lambda schedule {self.schedule!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be >= 0")


def _robust_init(problem: _Problem, floor: float, ridge: float, basis) -> MixRegParams:
    n = problem.n
    betas = solve_gram(problem.gram, problem.xty, ridge)
    # components start wide (pooled variance) so neighbouring curves compete
    st = problem.stack
    sigma2 = max(float(np.var(st.y)), floor)
    return MixRegParams(np.full(n, 1.0 / n), betas, np.full(n, sigma2), basis)


def fit_robust_em(dataset: FunctionalDataset, basis: BasisSpec, opts: Optional[RobustOptions] = None,
                  init_params: Optional[MixRegParams] = None):
    """Entropy-penalized EM that estimates the number of clusters.

    Starts with one component per curve; after each E-step the proportions
    get the penalized update, components whose proportion falls below
    ``1/n`` are dropped, and coefficients/variances are refit on the
    surviving components.
    """
    opts = opts or RobustOptions()
    n = dataset.n
    if n < 2:
        raise ConfigError("robust EM needs n >= 2")
    designs, resolved = designs_for(dataset, basis)
    problem = _problem_for(dataset, designs)
    floor = _floor(problem, opts)
    params = init_params if init_params is not None else _robust_init(problem, floor, opts.ridge, resolved)
    eta = min(1.0, 0.5 ** np.floor(problem.stack.p / 2.0 - 1.0))
    trace, k_trace, lam_trace = [], [], []
    converged = False
    stable = 0
    lam = 1.0 if opts.schedule == "adaptive" else default_lambda(1, n)
    for q in range(1, opts.max_iter + 1):
        if opts.lam is not None:
            lam = opts.lam
        elif opts.schedule == "ramp":
            lam = default_lambda(q, n)
        elif stable >= opts.freeze_after:
            lam = 0.0
        tau, ll = _e_step(problem, params)
        J = penalized_objective(ll, params.alphas, n, lam)
        trace.append(J)
        k_trace.append(params.K)
        lam_trace.append(lam)
        if len(trace) > 1 and stable >= opts.min_stable_iter and rel_change(J, trace[-2]) < opts.tol \
                and (opts.schedule == "ramp" or opts.lam is not None or lam == 0.0):
            converged = True
            break
        a_em = tau.mean(0)
        alphas = robust_proportions(tau, params.alphas, lam)
        keep = np.ones(params.K, dtype=bool)
        if opts.discard:
            keep = alphas >= 1.0 / n
        old = params.alphas[keep] / params.alphas[keep].sum()
        alphas = alphas[keep] / alphas[keep].sum()
        tau = tau[:, keep]
        tau = tau / tau.sum(1, keepdims=True)
        stable = stable + 1 if keep.all() else 0
        if opts.schedule == "adaptive" and opts.lam is None and stable < opts.freeze_after:
            lam = adaptive_lambda(alphas, old, a_em[keep], eta, n)
        nk = tau.sum(0)
        if np.any(nk < 1.0 / n ** 2):
            raise EmptyClusterError("a surviving component lost all weight")
        betas, sigma2s = problem.weighted_fit(tau, floor, opts.ridge)
        params = MixRegParams(alphas, betas, sigma2s, resolved)
    if params.K == 0:
        raise DegenerateModelError("robust EM discarded every component")
    tau, ll = _e_step(problem, params)
    report = FitReport(objective_trace=trace, iterations=len(trace), converged=converged,
                       final_K=params.K, seed=opts.seed, objective="penalized_loglik")
    report.extra = {"K_trace": k_trace, "lambda_trace": lam_trace}
    report.criteria = evaluation.bic_aic_icl(ll, params, tau, n).to_dict()
    return params, SoftPartition(tau), report


def robust_proportions(tau: np.ndarray, alphas: np.ndarray, lam: float) -> np.ndarray:
    """Penalized proportion update, capped so no proportion goes negative."""
    a_em = tau.mean(0)
    if lam == 0:
        return a_em
    la = np.log(alphas)
    E = float(np.sum(alphas * la))
    term = lam * alphas * (la - E)
    term = np.maximum(term, -a_em)
    a = a_em + term
    return a / a.sum()

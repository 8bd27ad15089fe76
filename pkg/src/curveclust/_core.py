"""Shared machinery for the mixture fitters: options, reports, partitions,
stacked curve storage and weighted least squares."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger("curveclust")

LOG2PI = float(np.log(2.0 * np.pi))


class CurveClustError(Exception):
    """Base class for all package errors."""


class DataError(CurveClustError, ValueError):
    """Input data violates a precondition (bad CSV, grid mismatch, ...)."""


class ConfigError(CurveClustError, ValueError):
    """Inconsistent model or run configuration."""


class DegenerateModelError(CurveClustError, ArithmeticError):
    """Numerical degeneracy: underflowed densities, empty components, ..."""


class EmptyClusterError(DegenerateModelError):
    pass


class InfeasibleSegmentationError(DataError):
    pass


@dataclass
class FitOptions:
    max_iter: int = 300
    tol: float = 1e-6
    n_init: int = 1
    init: str = "random_partition"
    seed: Optional[int] = 0
    variance_floor: Optional[float] = None  # None: 1e-6 * Var(all y)
    ridge: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0")
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")
        if self.init not in ("random_partition", "kmeans_partition"):
            raise ConfigError(f"unknown init {self.init!r}")


@dataclass
class FitReport:
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_K: int = 0
    criteria: dict = field(default_factory=dict)
    seed: Optional[int] = None
    objective: str = "loglik"
    extra: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return self.criteria.get("loglik", self.objective_trace[-1] if self.objective_trace else float("nan"))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SoftPartition:
    """Posterior memberships ``tau`` (n x K)."""

    tau: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)

    @property
    def K(self) -> int:
        return self.tau.shape[1]

    def labels(self) -> np.ndarray:
        """MAP labels in 1..K; ties go to the smallest index."""
        return map_labels(self.tau)


@dataclass
class HardPartition:
    labels: np.ndarray  # 1-based
    K: int

    @property
    def tau(self) -> np.ndarray:
        return one_hot(self.labels - 1, self.K)


def map_labels(tau: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(tau), axis=1) + 1


def one_hot(idx: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((len(idx), K))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def normalize_log_rows(logp: np.ndarray):
    """Row-normalize log-weights. Returns (probabilities, row log-sums)."""
    lse = logsumexp(logp, axis=1)
    if not np.all(np.isfinite(lse)):
        bad = np.flatnonzero(~np.isfinite(lse))
        raise DegenerateModelError(f"all component densities underflow for rows {bad[:10].tolist()}")
    return np.exp(logp - lse[:, None]), lse


def rel_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)


def random_partition(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Random 0-based labels with every cluster non-empty."""
    if n < K:
        raise ConfigError(f"need n >= K (n={n}, K={K})")
    labels = rng.integers(0, K, size=n)
    labels[rng.permutation(n)[:K]] = np.arange(K)
    return labels


def kmeans_partition(Y: np.ndarray, K: int, rng: np.random.Generator, n_iter: int = 50) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds on a common-grid response matrix."""
    n = Y.shape[0]
    centers = [Y[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min([((Y - c) ** 2).sum(1) for c in centers], axis=0)
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(Y[rng.choice(n, p=p)])
    C = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for it in range(n_iter):
        d2 = ((Y[:, None, :] - C[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        for k in range(K):
            if not np.any(new == k):
                new[np.argmax(d2[np.arange(n), new])] = k
        if it > 0 and np.array_equal(new, labels):
            break
        labels = new
        C = np.array([Y[labels == k].mean(0) for k in range(K)])
    return labels


def child_seeds(seed: Optional[int], count: int) -> list:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(count)]


class CurveStack:
    """All observations of a dataset flattened into one long vector.

    ``y``, ``X`` hold the concatenated responses and design rows, ``owner``
    maps each row to its curve and ``starts`` marks curve boundaries for
    ``np.add.reduceat``.
    """

    def __init__(self, ys: Sequence[np.ndarray], designs: Sequence[np.ndarray]):
        if len(ys) != len(designs):
            raise DataError("one design matrix per curve is required")
        for i, (y, X) in enumerate(zip(ys, designs)):
            if X.ndim != 2 or X.shape[0] != len(y):
                raise DataError(f"design rows ({X.shape[0]}) != responses ({len(y)}) for curve {i}")
        self.n = len(ys)
        self.lengths = np.array([len(y) for y in ys])
        self.starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
        self.y = np.concatenate([np.asarray(y, float) for y in ys])
        self.X = np.vstack(designs).astype(float)
        self.owner = np.repeat(np.arange(self.n), self.lengths)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def per_curve(self, values: np.ndarray) -> np.ndarray:
        """Sum row values (N,) or (N, K) within each curve."""
        return np.add.reduceat(values, self.starts, axis=0)

    def default_floor(self) -> float:
        v = float(np.var(self.y))
        return 1e-6 * v if v > 0 else 1e-12


def gaussian_logpdf(resid2: np.ndarray, sigma2) -> np.ndarray:
    return -0.5 * (LOG2PI + np.log(sigma2) + resid2 / sigma2)


def solve_weighted_ls(X: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Solve ``(X' W X) b = X' W y``; see :func:`solve_gram`."""
    Xw = X * w[:, None]
    return solve_gram(X.T @ Xw, Xw.T @ y, ridge)


def solve_gram(G: np.ndarray, b: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Solve one or a stack of symmetric systems ``G b = rhs``.

    The system is equilibrated by its diagonal first (raw polynomial columns
    differ in scale by many orders of magnitude); a singular Gram gets
    ``ridge`` added to the equilibrated diagonal.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    single = G.ndim == 2
    if single:
        G, b = G[None], b[None]
    p = G.shape[-1]
    d = np.sqrt(np.abs(np.diagonal(G, axis1=1, axis2=2)))
    d = np.where(d > 0, d, 1.0)
    Gs = G / (d[:, :, None] * d[:, None, :])
    s = np.linalg.svd(Gs, compute_uv=False)
    singular = (s[:, 0] <= 0) | (s[:, -1] <= s[:, 0] * p * 1e-13)
    if np.any(singular):
        Gs = Gs.copy()
        Gs[singular] += ridge * np.eye(p)
    out = np.linalg.solve(Gs, (b / d)[..., None])[..., 0] / d
    return out[0] if single else out


def mixture_loglik(log_joint: np.ndarray):
    """``log_joint[i, k] = log alpha_k + log f_k(y_i)`` -> (tau, total loglik)."""
    tau, lse = normalize_log_rows(log_joint)
    return tau, float(lse.sum())

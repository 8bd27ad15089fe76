"""Model selection criteria and clustering metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from ._core import DataError


@dataclass
class CriterionValues:
    loglik: float
    complete_loglik_at_map: float
    nu: int
    n: int
    bic: float
    aic: float
    icl: float

    def to_dict(self) -> dict:
        return asdict(self)


def count_free_parameters(params) -> int:
    """Number of free parameters of any fitted parameter record.

    Every record implements ``n_free_parameters``; mixing proportions count
    ``K - 1``, PWRM boundaries count as one parameter each, and left-right
    Markov chains only count their unmasked transition entries.
    """
    return int(params.n_free_parameters())


def bic_aic_icl(loglik: float, params, tau, n: int, nu: int | None = None) -> CriterionValues:
    """BIC/AIC/ICL; ICL uses the complete-data log-likelihood at the MAP partition.

    ``log L_c(z_map) = loglik + sum_i log tau_{i, z_i}`` so ICL <= BIC, with
    equality for crisp memberships.
    """
    nu = count_free_parameters(params) if nu is None else int(nu)
    tau = np.asarray(tau, dtype=float)
    top = tau[np.arange(tau.shape[0]), np.argmax(tau, axis=1)]
    with np.errstate(divide="ignore"):
        clog = float(loglik + np.sum(np.log(top)))
    pen = nu * np.log(n) / 2.0
    return CriterionValues(loglik=float(loglik), complete_loglik_at_map=clog, nu=nu, n=int(n),
                           bic=float(loglik - pen), aic=float(loglik - nu), icl=float(clog - pen))


def _confusion(true_labels, predicted_labels):
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape or t.ndim != 1:
        raise DataError("label vectors must be 1-d and of equal length")
    if len(t) == 0:
        raise DataError("empty label vectors")
    tu, ti = np.unique(t, return_inverse=True)
    pu, pi = np.unique(p, return_inverse=True)
    C = np.zeros((len(tu), len(pu)), dtype=int)
    np.add.at(C, (ti, pi), 1)
    return C


def misclassification_rate(true_labels, predicted_labels) -> float:
    """Error rate under the best one-to-one relabeling of the predictions.

    All relabelings are enumerated for up to 8 labels; larger problems use
    the Hungarian assignment on the confusion matrix. When the two label
    sets differ in size, unmatched predicted clusters count as errors.
    """
    C = _confusion(true_labels, predicted_labels)
    n = C.sum()
    K = max(C.shape)
    S = np.zeros((K, K), dtype=int)
    S[:C.shape[0], :C.shape[1]] = C
    if K <= 8:
        best = max(sum(S[i, perm[i]] for i in range(K)) for perm in itertools.permutations(range(K)))
    else:
        r, c = linear_sum_assignment(-S)
        best = S[r, c].sum()
    return float(1.0 - best / n)


def adjusted_rand_index(part_a, part_b) -> float:
    C = _confusion(part_a, part_b)
    n = C.sum()
    sum_ij = comb(C, 2).sum()
    sum_a = comb(C.sum(1), 2).sum()
    sum_b = comb(C.sum(0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2) if n > 1 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def intra_cluster_inertia(dataset, hard_partition, cluster_mean_curves) -> float:
    """``sum_k sum_{i in k} ||y_i - mean_k||^2`` on a common grid.

    ``cluster_mean_curves`` is indexed by label - 1 (labels are 1-based).
    """
    Y = dataset.matrix()
    labels = np.asarray(getattr(hard_partition, "labels", hard_partition), dtype=int)
    means = np.atleast_2d(np.asarray(cluster_mean_curves, dtype=float))
    if means.shape[1] != Y.shape[1]:
        raise DataError(f"mean curves have {means.shape[1]} points, grid has {Y.shape[1]}")
    if labels.min() < 1 or labels.max() > means.shape[0]:
        raise DataError("labels must index the mean curves (1..K)")
    return float(((Y - means[labels - 1]) ** 2).sum())


def empirical_cluster_means(dataset, labels) -> np.ndarray:
    """Pointwise averages of each cluster's curves (empty clusters give NaN rows)."""
    Y = dataset.matrix()
    labels = np.asarray(labels, dtype=int)
    K = labels.max()
    out = np.full((K, Y.shape[1]), np.nan)
    for k in range(1, K + 1):
        if np.any(labels == k):
            out[k - 1] = Y[labels == k].mean(0)
    return out


@dataclass
class Candidate:
    K: int
    R: object
    status: str
    criteria: CriterionValues | None = None
    result: tuple | None = None


def sweep(candidates, fit, criterion: str = "bic"):
    """Fit every ``(K, R)`` candidate and pick the best by ``criterion``.

    ``fit(K, R)`` returns ``(params, partition, report)`` with the criteria
    stored in ``report.criteria``. Candidates raising a package error are
    kept with their status and skipped. Returns ``(candidates, best_index)``
    where ``best_index`` is None when every candidate failed.
    """
    from ._core import CurveClustError
    if criterion not in ("bic", "aic", "icl"):
        raise ValueError(f"unknown criterion {criterion!r}")
    rows, best, best_val = [], None, -np.inf
    for K, R in candidates:
        try:
            res = fit(K, R)
        except CurveClustError as exc:
            rows.append(Candidate(K, R, f"failed: {exc}"))
            continue
        crit = CriterionValues(**res[2].criteria) if not isinstance(res[2].criteria, CriterionValues) else res[2].criteria
        rows.append(Candidate(K, R, "ok", crit, res))
        val = getattr(crit, criterion)
        if val > best_val:
            best, best_val = len(rows) - 1, val
    return rows, best

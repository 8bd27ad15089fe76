"""Supervised curve classification with one generative model per class.

FLDA fits a single regression model (polynomial, spline, B-spline or RHLP)
per class; FMDA fits a MixRHLP per class so that a class can hold several
sub-populations. Prediction uses the Bayes allocation rule in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from ._core import ConfigError, DataError, DegenerateModelError, FitOptions, normalize_log_rows
from .basis import BasisSpec, build_design
from .dataset import FunctionalDataset
from .mixreg import MixRegParams, component_loglik, m_step
from .mixrhlp import (MixRHLPParams, RHLPParams, fit_em_mixrhlp, fit_rhlp, mixrhlp_loglik_matrix,
                      rhlp_loglik)

FLDA_FAMILIES = ("polynomial", "spline", "bspline", "rhlp")


@dataclass
class FldaModel:
    classes: list            # original label values, in class-index order
    priors: np.ndarray       # (G,)
    family: str
    class_models: list       # MixRegParams with K=1, or RHLPParams

    @property
    def G(self) -> int:
        return len(self.classes)

    def class_logliks(self, dataset: FunctionalDataset) -> np.ndarray:
        out = np.empty((dataset.n, self.G))
        for g, model in enumerate(self.class_models):
            if self.family == "rhlp":
                out[:, g] = [rhlp_loglik(c, model) for c in dataset.curves]
            else:
                out[:, g] = [component_loglik(c, model.betas[0], model.sigma2s[0], build_design(c.xs, model.basis))
                             for c in dataset.curves]
        return out

    def to_dict(self) -> dict:
        return {"family": "flda", "class_family": self.family, "classes": list(self.classes),
                "priors": self.priors.tolist(), "class_models": [m.to_dict() for m in self.class_models]}

    @classmethod
    def from_dict(cls, d: dict) -> "FldaModel":
        fam = d["class_family"]
        load = RHLPParams.from_dict if fam == "rhlp" else MixRegParams.from_dict
        return cls(list(d["classes"]), np.array(d["priors"], dtype=float), fam, [load(m) for m in d["class_models"]])


@dataclass
class FmdaModel:
    classes: list
    priors: np.ndarray
    class_models: list       # MixRHLPParams

    @property
    def G(self) -> int:
        return len(self.classes)

    def class_logliks(self, dataset: FunctionalDataset) -> np.ndarray:
        cols = []
        for model in self.class_models:
            ll = mixrhlp_loglik_matrix(dataset, model)
            cols.append(logsumexp(ll + np.log(model.alphas), axis=1))
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        return {"family": "fmda", "classes": list(self.classes), "priors": self.priors.tolist(),
                "class_models": [m.to_dict() for m in self.class_models]}

    @classmethod
    def from_dict(cls, d: dict) -> "FmdaModel":
        return cls(list(d["classes"]), np.array(d["priors"], dtype=float),
                   [MixRHLPParams.from_dict(m) for m in d["class_models"]])


def _split_classes(dataset: FunctionalDataset, allow_single: bool):
    if not dataset.has_labels:
        raise DataError("training requires a label on every curve")
    labels = np.asarray(dataset.labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DataError("at least two classes are required")
    groups = []
    for g in classes:
        idx = np.flatnonzero(labels == g)
        if len(idx) < 2 and not allow_single:
            raise DataError(f"class {g} has a single curve; its variance is undefined")
        groups.append(idx)
    priors = np.array([len(i) for i in groups], dtype=float) / dataset.n
    return classes, priors, groups


def train_flda(dataset: FunctionalDataset, family: str = "bspline", basis: Optional[BasisSpec] = None,
               R: int = 2, opts: Optional[FitOptions] = None, allow_single: bool = False) -> FldaModel:
    """One model per class: least squares for polynomial/spline/bspline
    families (``basis`` gives degree and knots), an RHLP for ``rhlp`` (its
    polynomial degree comes from ``basis.degree``, ``R`` regimes)."""
    opts = opts or FitOptions()
    family = {"poly": "polynomial"}.get(family, family)
    if family not in FLDA_FAMILIES:
        raise ConfigError(f"family must be one of {FLDA_FAMILIES}")
    basis = basis or BasisSpec(family if family != "rhlp" else "polynomial", 3)
    classes, priors, groups = _split_classes(dataset, allow_single)
    models = []
    if family == "rhlp":
        for idx in groups:
            comp, _, _ = fit_rhlp(dataset.subset(idx), basis.degree, R, opts)
            models.append(comp)
    else:
        spec = BasisSpec(family, basis.degree, basis.interior_knots, basis.domain)
        # knots are placed once over the whole training domain and shared by all classes
        resolved = spec.resolved(np.concatenate([c.xs for c in dataset.curves]))
        for idx in groups:
            sub = dataset.subset(idx)
            designs = [build_design(c.xs, resolved) for c in sub.curves]
            params = m_step(sub, np.ones((sub.n, 1)), designs, opts)
            params.basis = resolved
            models.append(params)
    return FldaModel(classes, priors, family, models)


def train_fmda(dataset: FunctionalDataset, K: Union[int, Sequence[int]], R: Union[int, Sequence], degree: int = 1,
               opts: Optional[FitOptions] = None, allow_single: bool = False) -> FmdaModel:
    """A MixRHLP per class. ``K`` is one count or one per class; ``R`` is a
    count, one per class, or one list of per-component counts per class."""
    opts = opts or FitOptions()
    classes, priors, groups = _split_classes(dataset, allow_single)
    G = len(classes)
    Ks = [int(K)] * G if isinstance(K, (int, np.integer)) else [int(k) for k in K]
    Rs = [R] * G if isinstance(R, (int, np.integer)) else list(R)
    if len(Ks) != G or len(Rs) != G:
        raise ConfigError("K and R must be given once or once per class")
    models = []
    for idx, k, r in zip(groups, Ks, Rs):
        params, _, _ = fit_em_mixrhlp(dataset.subset(idx), degree, k, r, opts)
        models.append(params)
    return FmdaModel(classes, priors, models)


def posterior_from_logliks(log_dens: np.ndarray, priors) -> np.ndarray:
    """Normalize ``log w_g + log f_g`` per row."""
    log_joint = np.asarray(log_dens, dtype=float) + np.log(np.asarray(priors, dtype=float))
    if np.any(np.all(~np.isfinite(log_joint), axis=1)):
        raise DegenerateModelError("every class density underflowed for some curve")
    post, _ = normalize_log_rows(log_joint)
    return post


def predict(model: Union[FldaModel, FmdaModel], dataset: FunctionalDataset):
    """Bayes allocation: ``(labels, posteriors)``; labels use the training
    label values and ties go to the smallest class index."""
    post = posterior_from_logliks(model.class_logliks(dataset), model.priors)
    idx = np.argmax(post, axis=1)
    return np.asarray(model.classes)[idx], post


def stratified_folds(labels, n_folds: int = 5, seed: Optional[int] = 0) -> np.ndarray:
    """Fold index per curve; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=int)
    offset = 0
    for g in sorted(set(labels.tolist())):
        idx = rng.permutation(np.flatnonzero(labels == g))
        folds[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset += len(idx)
    return folds


def cross_validate(dataset: FunctionalDataset, train: Callable[[FunctionalDataset], object],
                   n_folds: int = 5, seed: Optional[int] = 0) -> float:
    """Misclassification rate of ``train`` under seeded stratified K-fold CV."""
    labels = np.asarray(dataset.labels)
    folds = stratified_folds(labels, n_folds, seed)
    errors = 0
    for f in range(n_folds):
        test = np.flatnonzero(folds == f)
        if len(test) == 0:
            continue
        model = train(dataset.subset(np.flatnonzero(folds != f)))
        pred, _ = predict(model, dataset.subset(test))
        errors += int(np.sum(pred != labels[test]))
    return errors / dataset.n

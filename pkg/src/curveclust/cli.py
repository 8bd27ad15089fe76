"""Command-line front end.

``curveclust {generate,fit,predict,evaluate,select,segment} [options]``

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then command-line flags (later sources win). Every run writes
``report.json`` with the resolved settings; tabular outputs are tidy CSV.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from ._core import (ConfigError, DataError, DegenerateModelError, FitOptions, SoftPartition,
                    mixture_loglik)
from .basis import BasisSpec, build_design
from .dataset import FunctionalDataset, WaveformSpec, fmt, generate_regime_curves, generate_waveform, load_csv, save_csv
from .discriminant import FldaModel, FmdaModel, predict, train_flda, train_fmda
from .mixhmmr import (MixHMMRParams, _Groups, _e_step as _hmm_e_step, cluster_state_profiles, fit_em_mixhmmr,
                      hmmr_mean_curve, poly_design, regime_segmentation)
from .mixreg import MixRegParams, RobustOptions, e_step as _mixreg_e_step, fit_em, fit_robust_em
from .mixrhlp import (MixRHLPParams, RHLPParams, fit_em_mixrhlp, logistic_proportions,
                      mixrhlp_loglik_matrix, regime_posteriors, rhlp_mean_curve)
from .pwrm import PWRMParams, _component_logliks, dp_segment, fit_cem_pwrm, fit_em_pwrm, interpolated_mean_curve
from .serialization import load_model, model_document, write_json

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4
FAMILIES = ("mixreg", "pwrm", "mixhmmr", "mixrhlp", "rhlp", "flda", "fmda")
CLUSTER_FAMILIES = ("mixreg", "pwrm", "mixhmmr", "mixrhlp")

log = logging.getLogger("curveclust.cli")

DEFAULTS = {
    "model": "mixreg", "basis": "bspline", "degree": None, "knots": 3, "K": None, "R": "2",
    "robust": False, "lambda": None, "schedule": "adaptive", "max_iter": 300, "tol": 1e-6, "n_init": 1,
    "seed": 0, "threads": 1, "init": "random_partition", "variance": "regime", "ergodic": False,
    "input": None, "out_dir": ".", "criterion": "bic", "interpolate": False, "constrained": False,
    "cem": False, "labels": None, "class_model": "bspline", "K_range": None, "R_range": None,
    "kind": "waveform", "n": 500, "noise": None, "m": 200, "model_file": None, "partition": None,
    "pooled": False, "config": None,
}


# --- argument parsing ---------------------------------------------------------

def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def _model_options(p):
    _add(p, "--model", choices=FAMILIES)
    _add(p, "--basis", choices=("poly", "polynomial", "spline", "bspline"))
    _add(p, "--degree", type=int, help="polynomial degree (default 3 for mixreg/flda, 1 otherwise)")
    _add(p, "--knots", type=int, help="number of uniform interior knots")
    _add(p, "--K", type=str, help="number of clusters (fmda: one value or a comma list per class)")
    _add(p, "--R", type=str, help="regimes: one value or a comma list per cluster")
    _add(p, "--robust", action="store_true", help="mixreg: robust EM estimating K")
    _add(p, "--lambda", type=float, dest="lambda", help="robust EM: constant entropy penalty")
    _add(p, "--schedule", choices=("adaptive", "ramp"), help="robust EM penalty schedule")
    _add(p, "--cem", action="store_true", help="pwrm: classification EM")
    _add(p, "--constrained", action="store_true", help="pwrm CEM: K-means-like constrained model")
    _add(p, "--interpolate", action="store_true", help="pwrm: join regime means at borders in means.csv")
    _add(p, "--variance", choices=("regime", "cluster", "shared"), help="pwrm variance structure")
    _add(p, "--ergodic", action="store_true", help="mixhmmr: unrestricted transition matrix")
    _add(p, "--class-model", dest="class_model", choices=("poly", "polynomial", "spline", "bspline", "rhlp"),
         help="flda: class-conditional model")
    _add(p, "--labels", help="CSV with curve_id,label attached to the input curves")


def _run_options(p):
    _add(p, "--in", dest="input", help="input curves CSV (curve_id,x,y[,label])")
    _add(p, "--out-dir", dest="out_dir")
    _add(p, "--config", help="JSON file with default settings")
    _add(p, "--max-iter", dest="max_iter", type=int)
    _add(p, "--tol", type=float)
    _add(p, "--n-init", dest="n_init", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--threads", type=int)
    _add(p, "--init", choices=("random_partition", "kmeans_partition"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="curveclust", description="Model-based clustering and classification of curves.")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="simulate a labeled curve dataset")
    _run_options(g)
    _add(g, "--kind", choices=("waveform", "regimes"))
    _add(g, "--n", type=int)
    _add(g, "--K", type=str)
    _add(g, "--R", type=str)
    _add(g, "--degree", type=int)
    _add(g, "--noise", type=float)
    _add(g, "--m", type=int, help="regimes: grid size")
    f = sub.add_parser("fit", help="fit a model")
    _run_options(f)
    _model_options(f)
    s = sub.add_parser("select", help="fit a range of candidates and pick one by a criterion")
    _run_options(s)
    _model_options(s)
    _add(s, "--K-range", dest="K_range", help="e.g. 1:5 or 1,2,4")
    _add(s, "--R-range", dest="R_range", help="e.g. 1:4")
    _add(s, "--criterion", choices=("bic", "aic", "icl"))
    pr = sub.add_parser("predict", help="posterior memberships or class predictions from a saved model")
    _run_options(pr)
    _add(pr, "--model-file", dest="model_file", required=True)
    ev = sub.add_parser("evaluate", help="misclassification, ARI and inertia of a partition")
    _run_options(ev)
    _add(ev, "--partition", required=True, help="partition.csv or predictions.csv")
    _add(ev, "--labels", help="CSV with curve_id,label (default: label column of --in)")
    _add(ev, "--model-file", dest="model_file", help="model whose mean curves are used for inertia")
    sg = sub.add_parser("segment", help="optimal segmentation or regime posteriors")
    _run_options(sg)
    _add(sg, "--R", type=str)
    _add(sg, "--degree", type=int)
    _add(sg, "--pooled", action="store_true", help="one segmentation shared by all curves")
    _add(sg, "--model-file", dest="model_file")
    return ap


def resolve_config(ns: argparse.Namespace) -> dict:
    """Defaults < config file < command-line flags."""
    given = vars(ns)
    cfg = dict(DEFAULTS)
    path = given.get("config")
    if path:
        from .serialization import read_json
        try:
            data = read_json(path)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in data.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[key] = v
    cfg.update(given)
    return cfg


# --- helpers ------------------------------------------------------------------

def _int_list(text, what: str):
    if text is None:
        return None
    if isinstance(text, (int, np.integer)):
        return int(text)
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be an integer or a comma-separated list") from None
    if not vals:
        raise ConfigError(f"{what} is empty")
    return vals[0] if len(vals) == 1 else vals


def _range(text, what: str) -> list:
    if text is None:
        return None
    if isinstance(text, list):
        return [int(v) for v in text]
    s = str(text)
    try:
        if ":" in s:
            lo, hi = (int(v) for v in s.split(":"))
            vals = list(range(lo, hi + 1))
        else:
            vals = [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must look like 1:5 or 1,2,4") from None
    if not vals:
        raise ConfigError(f"{what} is empty")
    return vals


def _degree(cfg) -> int:
    if cfg["degree"] is not None:
        return int(cfg["degree"])
    return 3 if cfg["model"] in ("mixreg", "flda") else 1


def _options(cfg) -> FitOptions:
    kw = dict(max_iter=int(cfg["max_iter"]), tol=float(cfg["tol"]), n_init=int(cfg["n_init"]), seed=cfg["seed"],
              threads=int(cfg["threads"]), init=cfg["init"])
    if cfg["model"] == "mixreg" and cfg["robust"]:
        return RobustOptions(lam=cfg["lambda"], schedule=cfg["schedule"], **kw)
    return FitOptions(**kw)


def _basis(cfg) -> BasisSpec:
    return BasisSpec(cfg["basis"], _degree(cfg), int(cfg["knots"]))


def _read_truth(path) -> dict:
    out = {}
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or [h.strip() for h in rows[0][:2]] != ["curve_id", "label"]:
        raise DataError(f"{path}: header must start with curve_id,label")
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out[row[0].strip()] = int(row[1])
        except (ValueError, IndexError):
            raise DataError(f"{path}:{i}: malformed label row") from None
    return out


def _load_input(cfg, labels_path=None) -> FunctionalDataset:
    if not cfg["input"]:
        raise ConfigError("--in is required")
    try:
        ds = load_csv(cfg["input"])
    except OSError as exc:
        raise DataError(f"cannot read {cfg['input']}: {exc}") from exc
    if labels_path:
        truth = _read_truth(labels_path)
        missing = [c.id for c in ds.curves if c.id not in truth]
        if missing:
            raise DataError(f"no label for curves {missing[:5]}")
        ds = ds.with_labels([truth[c.id] for c in ds.curves])
    return ds


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _pooled_grid(ds: FunctionalDataset) -> np.ndarray:
    return np.unique(np.concatenate([c.xs for c in ds.curves]))


def _runs(labels) -> list:
    """(value, start, end) runs of a label sequence, end exclusive."""
    labels = np.asarray(labels)
    cuts = np.concatenate([[0], np.flatnonzero(np.diff(labels)) + 1, [len(labels)]])
    return [(int(labels[a]), int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:])]


# --- fitting ------------------------------------------------------------------

def _check_family_config(cfg):
    fam = cfg["model"]
    if fam not in FAMILIES:
        raise ConfigError(f"--model must be one of {FAMILIES}")
    if fam == "mixreg" and cfg["robust"]:
        return
    if fam in CLUSTER_FAMILIES and cfg["K"] is None:
        raise ConfigError(f"--K is required for {fam}" + (" (or use --robust)" if fam == "mixreg" else ""))
    if cfg["constrained"] and not (fam == "pwrm" and cfg["cem"]):
        raise ConfigError("--constrained applies to pwrm with --cem")


def fit_family(cfg, ds: FunctionalDataset, K=None, R=None):
    """Fit the configured family; returns (params, partition, report)."""
    fam = cfg["model"]
    opts = _options(cfg)
    deg = _degree(cfg)
    K = _int_list(cfg["K"], "--K") if K is None else K
    R = _int_list(cfg["R"], "--R") if R is None else R
    if fam == "mixreg":
        if cfg["robust"]:
            return fit_robust_em(ds, _basis(cfg), opts)
        return fit_em(ds, _basis(cfg), int(K), opts)
    if fam == "pwrm":
        if cfg["cem"]:
            return fit_cem_pwrm(ds, deg, int(K), R, opts, constrained=bool(cfg["constrained"]), variance=cfg["variance"])
        return fit_em_pwrm(ds, deg, int(K), R, opts, variance=cfg["variance"])
    if fam == "mixhmmr":
        return fit_em_mixhmmr(ds, deg, int(K), R, opts, left_right=not cfg["ergodic"])
    if fam == "mixrhlp":
        return fit_em_mixrhlp(ds, deg, int(K), R, opts)
    if fam == "rhlp":
        if isinstance(R, list):
            raise ConfigError("rhlp takes a single --R")
        params, part, report = fit_em_mixrhlp(ds, deg, 1, R, opts)
        return params, part, report
    raise ConfigError(f"{fam} is a classifier; it has no clustering fit")


def _mean_rows(params, ds, cfg, part) -> list:
    """(cluster, x, yhat) rows from the family's mean-curve operation."""
    rows = []
    if isinstance(params, MixRegParams):
        ux = _pooled_grid(ds)
        for k, mu in enumerate(params.mean_curves(ux), start=1):
            rows += [(k, x, y) for x, y in zip(ux, mu)]
    elif isinstance(params, PWRMParams):
        for k, c in enumerate(params.clusters, start=1):
            xs, mu = interpolated_mean_curve(c, params.grid) if cfg["interpolate"] else (params.grid, c.mean_curve(params.grid))
            rows += [(k, x, y) for x, y in zip(xs, mu)]
    elif isinstance(params, MixHMMRParams):
        ux, profiles = cluster_state_profiles(ds, params, part.tau)
        X = poly_design(ux, params.degree)
        for k, (comp, g) in enumerate(zip(params.components, profiles), start=1):
            rows += [(k, x, y) for x, y in zip(ux, hmmr_mean_curve(comp, X, g))]
    elif isinstance(params, MixRHLPParams):
        ux = _pooled_grid(ds)
        X = poly_design(ux, params.degree)
        for k, comp in enumerate(params.components, start=1):
            rows += [(k, x, y) for x, y in zip(ux, rhlp_mean_curve(comp, X, ux))]
    return rows


def _segment_rows(params, ds, part) -> list:
    """(cluster, regime, start_index, end_index, x_start, x_end) rows."""
    rows = []
    if isinstance(params, PWRMParams):
        g = params.grid
        for k, c in enumerate(params.clusters, start=1):
            for r, sl in enumerate(c.segmentation.slices(), start=1):
                rows.append((k, r, sl.start, sl.stop, g[sl.start], g[sl.stop - 1]))
    elif isinstance(params, MixHMMRParams):
        ux, profiles = cluster_state_profiles(ds, params, part.tau)
        for k, prof in enumerate(profiles, start=1):
            for r, a, b in _runs(regime_segmentation(prof)):
                rows.append((k, r, a, b, ux[a], ux[b - 1]))
    elif isinstance(params, MixRHLPParams):
        ux = _pooled_grid(ds)
        for k, comp in enumerate(params.components, start=1):
            for r, a, b in _runs(np.argmax(logistic_proportions(ux, comp.logistic), axis=1) + 1):
                rows.append((k, r, a, b, ux[a], ux[b - 1]))
    return rows


SEGMENT_HEADER = ["cluster", "regime", "start_index", "end_index", "x_start", "x_end"]


def _write_fit_outputs(out: Path, params, part, report, ds, cfg) -> None:
    doc = params.components[0] if cfg["model"] == "rhlp" else params
    write_json(out / "model.json", model_document(doc))
    tau = part.tau
    labels = part.labels() if isinstance(part, SoftPartition) else part.labels
    K = tau.shape[1]
    _write_rows(out / "partition.csv", ["curve_id", "hard_label"] + [f"tau_{k}" for k in range(1, K + 1)],
                [[c.id, int(l)] + [float(t) for t in row] for c, l, row in zip(ds.curves, labels, tau)])
    _write_rows(out / "means.csv", ["cluster", "x", "yhat"], _mean_rows(params, ds, cfg, part))
    seg = _segment_rows(params, ds, part)
    if seg:
        _write_rows(out / "segments.csv", SEGMENT_HEADER, seg)
    if isinstance(params, MixRHLPParams):
        ux = _pooled_grid(ds)
        rows = []
        for k, comp in enumerate(params.components, start=1):
            pi = logistic_proportions(ux, comp.logistic)
            rows += [(k, x, r + 1, float(pi[j, r])) for j, x in enumerate(ux) for r in range(comp.R)]
        _write_rows(out / "proportions.csv", ["cluster", "x", "regime", "pi"], rows)


def _report_doc(cfg, report) -> dict:
    return {"command": cfg["command"], "config": cfg, **report.to_dict()}


def _fit_classifier(cfg, ds: FunctionalDataset, out: Path) -> str:
    opts = _options(cfg)
    fam = cfg["model"]
    if fam == "flda":
        cm = cfg["class_model"]
        basis = BasisSpec("polynomial" if cm in ("poly", "rhlp") else cm, _degree(cfg), int(cfg["knots"]))
        R = _int_list(cfg["R"], "--R")
        model = train_flda(ds, cm, basis, R=R if isinstance(R, int) else R[0], opts=opts)
    else:
        K = _int_list(cfg["K"] or 1, "--K")
        R = _int_list(cfg["R"], "--R")
        model = train_fmda(ds, K, R, degree=_degree(cfg), opts=opts)
    write_json(out / "model.json", model_document(model))
    pred, post = predict(model, ds)
    _write_rows(out / "predictions.csv", ["curve_id", "label"] + [f"posterior_{g}" for g in range(1, model.G + 1)],
                [[c.id, int(l)] + [float(p) for p in row] for c, l, row in zip(ds.curves, pred, post)])
    err = float(np.mean(pred != ds.labels))
    write_json(out / "report.json", {"command": cfg["command"], "config": cfg, "classes": model.classes,
                                     "priors": model.priors, "training_error": err})
    return f"fit {fam}: G={model.G} training_error={err:.4f}"


def cmd_fit(cfg) -> str:
    _check_family_config(cfg)
    ds = _load_input(cfg, cfg["labels"])
    out = _out_dir(cfg)
    if cfg["model"] in ("flda", "fmda"):
        return _fit_classifier(cfg, ds, out)
    params, part, report = fit_family(cfg, ds)
    _write_fit_outputs(out, params, part, report, ds, cfg)
    write_json(out / "report.json", _report_doc(cfg, report))
    return (f"fit {cfg['model']}: K={report.final_K} loglik={report.loglik:.6g} "
            f"bic={report.criteria.get('bic', float('nan')):.6g} iterations={report.iterations} -> {out}")


def cmd_select(cfg) -> str:
    _check_family_config({**cfg, "K": cfg["K"] or 1})
    fam = cfg["model"]
    if fam in ("flda", "fmda"):
        raise ConfigError("select applies to clustering families")
    if fam == "mixreg" and cfg["robust"]:
        raise ConfigError("robust EM estimates K itself; use fit --robust")
    Ks = _range(cfg["K_range"], "--K-range") or [_int_list(cfg["K"], "--K")]
    if fam == "rhlp":
        Ks = [1]
    Rs = _range(cfg["R_range"], "--R-range") or [_int_list(cfg["R"], "--R")]
    if fam == "mixreg":
        Rs = [None]
    if any(k is None for k in Ks):
        raise ConfigError("--K-range or --K is required")
    ds = _load_input(cfg, cfg["labels"])
    out = _out_dir(cfg)
    cands = [(K, R) for K in Ks for R in Rs]
    rows, best = evaluation.sweep(cands, lambda K, R: fit_family(cfg, ds, K, R), cfg["criterion"])
    table = []
    for c in rows:
        R = "" if c.R is None else (";".join(map(str, c.R)) if isinstance(c.R, list) else c.R)
        if c.criteria is None:
            table.append([c.K, R, "", "", "", "", "", c.status])
        else:
            v = c.criteria
            table.append([c.K, R, v.loglik, v.nu, v.bic, v.aic, v.icl, c.status])
    _write_rows(out / "selection.csv", ["K", "R", "loglik", "nu", "bic", "aic", "icl", "status"], table)
    if best is None:
        raise DegenerateModelError("every candidate failed")
    win = rows[best]
    params, part, report = win.result
    _write_fit_outputs(out, params, part, report, ds, cfg)
    doc = _report_doc(cfg, report)
    doc["selected"] = {"K": win.K, "R": win.R, "criterion": cfg["criterion"]}
    write_json(out / "report.json", doc)
    return f"select {fam}: best K={win.K} R={win.R} by {cfg['criterion']} -> {out}"


# --- predict / evaluate / generate / segment ---------------------------------------

def posterior_memberships(model, ds: FunctionalDataset):
    """(hard labels, posterior matrix) of new curves under a saved model."""
    if isinstance(model, (FldaModel, FmdaModel)):
        return predict(model, ds)
    if isinstance(model, MixRegParams):
        designs = [build_design(c.xs, model.basis) for c in ds.curves]
        sp, _ = _mixreg_e_step(ds, model, designs)
        tau = sp.tau
    elif isinstance(model, PWRMParams):
        ds.require_common_grid("PWRM prediction")
        if not np.array_equal(ds.grid(), model.grid):
            raise DataError("curves are not on the grid the PWRM model was fitted on")
        tau, _ = mixture_loglik(_component_logliks(ds.matrix(), model) + np.log(model.alphas))
    elif isinstance(model, MixHMMRParams):
        tau, _, _ = _hmm_e_step(_Groups(ds, model.degree), model)
    elif isinstance(model, MixRHLPParams):
        tau, _ = mixture_loglik(mixrhlp_loglik_matrix(ds, model) + np.log(model.alphas))
    elif isinstance(model, RHLPParams):
        tau = np.ones((ds.n, 1))
    else:
        raise ConfigError(f"cannot predict with {type(model).__name__}")
    return np.argmax(tau, axis=1) + 1, tau


def cmd_predict(cfg) -> str:
    model = load_model(cfg["model_file"])
    ds = _load_input(cfg)
    out = _out_dir(cfg)
    labels, post = posterior_memberships(model, ds)
    G = post.shape[1]
    _write_rows(out / "predictions.csv", ["curve_id", "label"] + [f"posterior_{g}" for g in range(1, G + 1)],
                [[c.id, int(l)] + [float(p) for p in row] for c, l, row in zip(ds.curves, labels, post)])
    write_json(out / "report.json", {"command": cfg["command"], "config": cfg, "n": ds.n})
    return f"predict: {ds.n} curves -> {out / 'predictions.csv'}"


def _read_partition(path) -> dict:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    head = [h.strip() for h in rows[0]]
    col = "hard_label" if "hard_label" in head else "label" if "label" in head else None
    if head[0] != "curve_id" or col is None:
        raise DataError(f"{path}: expected curve_id and hard_label (or label) columns")
    j = head.index(col)
    try:
        return {r[0]: int(r[j]) for r in rows[1:] if r}
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed label") from None


def cmd_evaluate(cfg) -> str:
    ds = _load_input(cfg, cfg["labels"])
    if not ds.has_labels:
        raise DataError("evaluate needs true labels (label column or --labels)")
    pred_map = _read_partition(cfg["partition"])
    missing = [c.id for c in ds.curves if c.id not in pred_map]
    if missing:
        raise DataError(f"partition has no entry for curves {missing[:5]}")
    truth = ds.labels
    pred = np.array([pred_map[c.id] for c in ds.curves])
    metrics = {"n": ds.n, "misclassification": evaluation.misclassification_rate(truth, pred),
               "ari": evaluation.adjusted_rand_index(truth, pred), "inertia": None, "inertia_means": None}
    if ds.common_grid and pred.min() >= 1:
        if cfg["model_file"]:
            model = load_model(cfg["model_file"])
            means = _model_means_on_grid(model, ds)
            metrics["inertia_means"] = "model"
        else:
            means = evaluation.empirical_cluster_means(ds, pred)
            metrics["inertia_means"] = "empirical"
        if means is not None and pred.max() <= means.shape[0] and np.all(np.isfinite(means[np.unique(pred) - 1])):
            metrics["inertia"] = evaluation.intra_cluster_inertia(ds, pred, np.nan_to_num(means))
    out = _out_dir(cfg)
    write_json(out / "metrics.json", {**metrics, "config": cfg})
    write_json(out / "report.json", {"command": cfg["command"], "config": cfg, "metrics": metrics})
    return f"evaluate: misclassification={metrics['misclassification']:.4f} ari={metrics['ari']:.4f}"


def _model_means_on_grid(model, ds):
    xs = ds.grid()
    if isinstance(model, MixRegParams):
        return model.mean_curves(xs)
    if isinstance(model, PWRMParams):
        return model.mean_curves(xs) if np.array_equal(xs, model.grid) else None
    if isinstance(model, MixRHLPParams):
        X = poly_design(xs, model.degree)
        return np.vstack([rhlp_mean_curve(c, X, xs) for c in model.components])
    if isinstance(model, MixHMMRParams):
        _, tau = posterior_memberships(model, ds)
        _, profiles = cluster_state_profiles(ds, model, tau)
        X = poly_design(xs, model.degree)
        return np.vstack([hmmr_mean_curve(c, X, g) for c, g in zip(model.components, profiles)])
    return None


def cmd_generate(cfg) -> str:
    out = _out_dir(cfg)
    kind = cfg["kind"]
    if kind == "waveform":
        noise = 1.0 if cfg["noise"] is None else float(cfg["noise"])
        ds = generate_waveform(WaveformSpec(int(cfg["n"]), cfg["seed"], noise))
        meta = {"generator": "waveform"}
    elif kind == "regimes":
        K = _int_list(cfg["K"] or 3, "--K")
        R = _int_list(cfg["R"], "--R")
        if isinstance(K, list) or isinstance(R, list):
            raise ConfigError("generate takes scalar --K and --R")
        noise = 0.5 if cfg["noise"] is None else float(cfg["noise"])
        deg = 0 if cfg["degree"] is None else int(cfg["degree"])
        ds = generate_regime_curves(K, R, int(cfg["n"]), degree=deg, seed=cfg["seed"], noise_sd=noise,
                                    m=int(cfg["m"]))
        meta = {k: ds.meta[k] for k in ("generator", "change_points", "regime_sd")}
    else:
        raise ConfigError(f"unknown generator {kind!r}")
    save_csv(FunctionalDataset(tuple(c.__class__(c.id, c.xs, c.ys, None) for c in ds.curves)), out / "data.csv")
    _write_rows(out / "truth.csv", ["curve_id", "label"], [[c.id, c.label] for c in ds.curves])
    write_json(out / "report.json", {"command": cfg["command"], "config": cfg, "meta": meta, "n": ds.n})
    return f"generate {kind}: {ds.n} curves -> {out / 'data.csv'}"


def cmd_segment(cfg) -> str:
    ds = _load_input(cfg)
    out = _out_dir(cfg)
    summary = {}
    if cfg["model_file"]:
        model = load_model(cfg["model_file"])
        labels, tau = posterior_memberships(model, ds)
        part = SoftPartition(tau)
        if isinstance(model, RHLPParams):
            model = MixRHLPParams(np.ones(1), [model])
        if not isinstance(model, (PWRMParams, MixHMMRParams, MixRHLPParams)):
            raise ConfigError("segment needs a pwrm, mixhmmr, mixrhlp or rhlp model")
        rows = _segment_rows(model, ds, part)
        _write_rows(out / "segments.csv", SEGMENT_HEADER, rows)
        post_rows = _curve_regime_posteriors(model, ds, labels)
        if post_rows:
            _write_rows(out / "regime_posteriors.csv", ["curve_id", "cluster", "x", "regime", "probability"], post_rows)
        summary["segments"] = len(rows)
    else:
        R = _int_list(cfg["R"], "--R")
        if isinstance(R, list):
            raise ConfigError("segment without a model takes a single --R")
        deg = 0 if cfg["degree"] is None else int(cfg["degree"])
        rows, bounds = [], {}
        units = [("all", ds)] if cfg["pooled"] else [(c.id, FunctionalDataset((c,))) for c in ds.curves]
        for uid, sub in units:
            res = dp_segment(sub, None, R, deg)
            xs = sub.grid()
            bounds[uid] = res.boundaries.tolist()
            for r, sl in enumerate(res.segmentation.slices(), start=1):
                rows.append((uid, r, sl.start, sl.stop, xs[sl.start], xs[sl.stop - 1]))
        _write_rows(out / "segments.csv", ["curve_id"] + SEGMENT_HEADER[1:], rows)
        summary["boundaries"] = bounds
    write_json(out / "report.json", {"command": cfg["command"], "config": cfg, **summary})
    return f"segment: -> {out / 'segments.csv'}"


def _curve_regime_posteriors(model, ds, labels) -> list:
    rows = []
    if isinstance(model, MixRHLPParams):
        for k, comp in enumerate(model.components, start=1):
            idx = [i for i, l in enumerate(labels) if l == k]
            sub = ds.subset(idx)
            for c, g in zip(sub.curves, regime_posteriors(sub, comp)):
                rows += [(c.id, k, x, r + 1, float(g[j, r])) for j, x in enumerate(c.xs) for r in range(comp.R)]
    elif isinstance(model, MixHMMRParams):
        from .mixhmmr import emission_logpdf, forward_backward_batch
        for i, c in enumerate(ds.curves):
            comp = model.components[labels[i] - 1]
            lb = emission_logpdf(c.ys, poly_design(c.xs, model.degree), comp.betas, comp.sigma2s)[None]
            g = forward_backward_batch(lb, comp.chain.initial, comp.chain.transition)[0][0]
            rows += [(c.id, int(labels[i]), x, r + 1, float(g[j, r])) for j, x in enumerate(c.xs) for r in range(comp.R)]
    return rows


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "select": cmd_select, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "segment": cmd_segment}


def main(argv=None) -> int:
    level = os.environ.get("CURVECLUST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns)
        print(COMMANDS[cfg["command"]](cfg))
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
